"""Dual prediction heads: point CBT forecast with interval, stress probability/label.

The regression head forecasts the point CBT 120 minutes ahead; the
classification head maps that forecast through a logistic centered on the
38.8 degC clinical threshold:

    P(stress) = 1 / (1 + exp(-beta * (y_hat - theta)))
    label     = 1  iff  y_hat > theta   (strict)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ensemble import EnsembleBundle, ensemble_meta_matrix, predict_ensemble
from .features import PooledMatrix
from .timeseries import Timestamp
from .uncertainty import interval, sigma_raw

FORECAST_HEADER = "cow_id,t_utc,y_hat_c,lo_c,hi_c,p_stress,label"

DEFAULT_THETA = 38.8
DEFAULT_BETA = 5.0
BETA_GRID = tuple(range(1, 21))


class HeadError(Exception):
    """Invalid head configuration."""


@dataclass(frozen=True)
class ForecastRecord:
    cow: str
    t: Timestamp
    y_hat: float
    lo: float
    hi: float
    p_stress: float
    label: int
    beta: float
    theta: float

    def __post_init__(self):
        if not (self.lo <= self.y_hat <= self.hi):
            raise HeadError(f"interval [{self.lo}, {self.hi}] does not bracket {self.y_hat}")
        if not (0.0 <= self.p_stress <= 1.0):
            raise HeadError(f"p_stress {self.p_stress} outside [0, 1]")
        if self.label != int(self.y_hat > self.theta):
            raise HeadError("label must be the strict threshold indicator")

    def line(self) -> str:
        return (
            f"{self.cow},{self.t.iso()},{repr(self.y_hat)},{repr(self.lo)},"
            f"{repr(self.hi)},{repr(self.p_stress)},{self.label}"
        )


def stress_probability(y_hat, theta: float = DEFAULT_THETA, beta: float = DEFAULT_BETA):
    """Logistic stress probability; strictly increasing in the forecast."""
    if beta <= 0:
        raise HeadError(f"beta must be positive, got {beta}")
    z = beta * (np.asarray(y_hat, dtype=float) - theta)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    if np.isscalar(y_hat) or np.asarray(y_hat).ndim == 0:
        return float(out)
    return out


def stress_label(y_hat, theta: float = DEFAULT_THETA):
    """Strict exceedance indicator."""
    arr = (np.asarray(y_hat, dtype=float) > theta).astype(int)
    if np.isscalar(y_hat) or np.asarray(y_hat).ndim == 0:
        return int(arr)
    return arr


def f1_score(labels_true: np.ndarray, labels_pred: np.ndarray) -> float:
    tp = float(np.sum((labels_true == 1) & (labels_pred == 1)))
    fp = float(np.sum((labels_true == 0) & (labels_pred == 1)))
    fn = float(np.sum((labels_true == 1) & (labels_pred == 0)))
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def calibrate_beta(
    y_hat_val: np.ndarray, labels_val: np.ndarray, theta: float = DEFAULT_THETA
) -> float:
    """Grid-search beta maximizing validation F1 of probability-0.5 thresholding.

    Ties resolve to the smaller beta. Thresholding P(stress) at 0.5 equals
    y_hat > theta for every beta (logistic midpoint), so two-class validation
    data always ties across the grid and selects its smallest value; the grid
    is kept as the specified calibration surface. Single-class validation
    falls back to the default with a warning.
    """
    labels_val = np.asarray(labels_val)
    if len(set(labels_val.tolist())) < 2:
        import logging

        logging.getLogger(__name__).warning(
            "beta calibration needs both classes; defaulting to %s", DEFAULT_BETA
        )
        return DEFAULT_BETA
    best_beta, best_f1 = None, -1.0
    for beta in BETA_GRID:
        preds = (stress_probability(y_hat_val, theta, beta) > 0.5).astype(int)
        score = f1_score(labels_val, preds)
        if score > best_f1:
            best_beta, best_f1 = beta, score
    return float(best_beta)


def forecast(
    bundle: EnsembleBundle, pooled: PooledMatrix, timestamps=None
) -> list[ForecastRecord]:
    """One record per row: point forecast, interval, stress fields."""
    if bundle.calibration is None or bundle.bootstrap is None:
        raise HeadError("bundle lacks calibration or bootstrap replicas")
    y_hat = predict_ensemble(bundle.ensemble, pooled)
    meta_x = ensemble_meta_matrix(bundle.ensemble, pooled)
    sig = sigma_raw(bundle.bootstrap, meta_x)
    lo, hi = interval(y_hat, sig, bundle.calibration)
    probs = stress_probability(y_hat, bundle.theta, bundle.beta)
    labels = stress_label(y_hat, bundle.theta)
    records = []
    for i in range(pooled.n_rows):
        records.append(
            ForecastRecord(
                cow=str(pooled.cow_ids[i]),
                t=Timestamp(int(pooled.timestamps[i])),
                y_hat=float(y_hat[i]),
                lo=float(lo[i]),
                hi=float(hi[i]),
                p_stress=float(probs[i]),
                label=int(labels[i]),
                beta=bundle.beta,
                theta=bundle.theta,
            )
        )
    return records


def write_forecasts(records: list[ForecastRecord], path) -> None:
    lines = [FORECAST_HEADER] + [r.line() for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

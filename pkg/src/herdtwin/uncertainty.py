"""Bootstrap ensemble variance, coverage calibration, and intervals.

Epistemic spread comes from replicas of the meta-model trained on cow-blocked
resamples (rows within a cow are autocorrelated; row-wise resampling would
understate variance). The raw replica dispersion is scaled by a coverage-
calibrated constant and floored, then turned into symmetric z-intervals:

    sigma_final = max(alpha * sigma_raw, sigma_min)
    interval    = y_hat +/- z * sigma_final
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .gbdt import GbdtConfig, GbdtModel, fit, predict_matrix

logger = logging.getLogger(__name__)

ALPHA_GRID = tuple(round(0.5 + 0.1 * i, 1) for i in range(26))  # 0.5 .. 3.0


class UncertaintyError(Exception):
    """Invalid uncertainty configuration or mismatched inputs."""


@dataclass
class BootstrapSet:
    replicas: list[GbdtModel]
    seeds: list[int]

    def __post_init__(self):
        if len(self.replicas) < 2:
            raise UncertaintyError("bootstrap needs B >= 2 replicas")

    @property
    def b(self) -> int:
        return len(self.replicas)


@dataclass(frozen=True)
class CalibrationConstants:
    alpha: float
    sigma_min: float = 0.03
    z_alpha: float = 1.96
    under_coverage: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise UncertaintyError("alpha must be positive")
        if self.sigma_min < 0:
            raise UncertaintyError("sigma_min must be nonnegative")


def bootstrap_fit(
    x_matrix: np.ndarray,
    y: np.ndarray,
    cow_ids: np.ndarray,
    base_cfg: GbdtConfig,
    feature_manifest,
    b: int = 100,
    seed: int = 0,
) -> BootstrapSet:
    """Train B replicas on cow-blocked resamples (cows drawn with replacement).

    Each replica's resample is deterministic in (seed, replica index); the
    per-replica seed is recorded.
    """
    if b < 2:
        raise UncertaintyError(f"B must be >= 2, got {b}")
    labeled = ~np.isnan(y)
    x_matrix = np.asarray(x_matrix, dtype=float)[labeled]
    y = np.asarray(y, dtype=float)[labeled]
    cow_ids = np.asarray(cow_ids, dtype=object)[labeled]
    cows = sorted(set(cow_ids))
    rows_of = {cow: np.nonzero(cow_ids == cow)[0] for cow in cows}
    replicas = []
    seeds = []
    for k in range(b):
        replica_seed = seed * 100_003 + k
        rng = np.random.default_rng([seed, k])
        drawn = rng.choice(len(cows), size=len(cows), replace=True)
        rows = np.concatenate([rows_of[cows[i]] for i in drawn])
        cfg = GbdtConfig(
            n_trees=base_cfg.n_trees,
            learning_rate=base_cfg.learning_rate,
            max_leaves=base_cfg.max_leaves,
            min_samples_leaf=base_cfg.min_samples_leaf,
            feature_fraction=base_cfg.feature_fraction,
            bagging_fraction=base_cfg.bagging_fraction,
            n_bins=base_cfg.n_bins,
            seed=replica_seed,
        )
        replicas.append(fit(x_matrix[rows], y[rows], cfg, feature_manifest))
        seeds.append(replica_seed)
    return BootstrapSet(replicas=replicas, seeds=seeds)


def replica_predictions(bs: BootstrapSet, x_matrix: np.ndarray) -> np.ndarray:
    """(B, n) matrix of per-replica predictions."""
    return np.vstack([predict_matrix(m, x_matrix) for m in bs.replicas])


def sigma_raw(bs: BootstrapSet, x_matrix: np.ndarray) -> np.ndarray:
    """Sample standard deviation of the replica predictions, per row."""
    return replica_predictions(bs, x_matrix).std(axis=0, ddof=1)


def coverage(y_true, y_hat, sigma, alpha, sigma_min, z) -> float:
    sigma_final = np.maximum(alpha * np.asarray(sigma), sigma_min)
    err = np.abs(np.asarray(y_true) - np.asarray(y_hat))
    return float(np.mean(err <= z * sigma_final))


def calibrate_alpha(
    sigma: np.ndarray,
    y_hat: np.ndarray,
    y_true: np.ndarray,
    target_coverage: float = 0.95,
    sigma_min: float = 0.03,
    z: float = 1.96,
) -> CalibrationConstants:
    """Smallest grid alpha whose empirical coverage reaches the target.

    Ties (several alphas reaching the target) resolve to the smallest, i.e.
    the narrowest intervals. If no grid point reaches the target, returns
    alpha = 3.0 flagged as under-coverage.
    """
    if y_true.size < 50:
        logger.warning("calibrating on only %d rows (< 50)", y_true.size)
    for alpha in ALPHA_GRID:
        if coverage(y_true, y_hat, sigma, alpha, sigma_min, z) >= target_coverage:
            return CalibrationConstants(alpha=alpha, sigma_min=sigma_min, z_alpha=z)
    logger.warning("no alpha in the grid reaches coverage %.3f", target_coverage)
    return CalibrationConstants(
        alpha=ALPHA_GRID[-1], sigma_min=sigma_min, z_alpha=z, under_coverage=True
    )


def calibrate(
    bs: BootstrapSet,
    x_val: np.ndarray,
    y_val: np.ndarray,
    y_hat_val: np.ndarray,
    target_coverage: float = 0.95,
    sigma_min: float = 0.03,
    z: float = 1.96,
) -> CalibrationConstants:
    """Coverage-based calibration of the interval scale on a validation set."""
    labeled = ~np.isnan(y_val)
    return calibrate_alpha(
        sigma_raw(bs, x_val[labeled]),
        np.asarray(y_hat_val)[labeled],
        np.asarray(y_val)[labeled],
        target_coverage=target_coverage,
        sigma_min=sigma_min,
        z=z,
    )


def interval(y_hat, sigma_raw_value, cc: CalibrationConstants):
    """Symmetric interval around the point forecast; floor prevents collapse."""
    sigma_final = np.maximum(cc.alpha * np.asarray(sigma_raw_value, dtype=float), cc.sigma_min)
    y_hat = np.asarray(y_hat, dtype=float)
    return y_hat - cc.z_alpha * sigma_final, y_hat + cc.z_alpha * sigma_final


def picp(y_true, lo, hi) -> float:
    """Fraction of truths inside [lo, hi], endpoints included."""
    y_true = np.asarray(y_true, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if y_true.size == 0:
        raise UncertaintyError("picp needs at least one row")
    if y_true.shape != lo.shape or y_true.shape != hi.shape:
        raise UncertaintyError(
            f"length mismatch: y {y_true.shape}, lo {lo.shape}, hi {hi.shape}"
        )
    return float(np.mean((lo <= y_true) & (y_true <= hi)))

"""GroupKFold experiment driver, metric suite, and the two ablation protocols.

Every cross-validated number in this module comes from cow-disjoint splits:
training, calibration, and evaluation cow sets never overlap, and an audit
assertion enforces it on every fold. Twin features are computed once per cow
(they are causal and trained on nothing), then reused across folds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._parallel import parallel_map
from .ensemble import (
    EnsembleBundle,
    audit_disjoint,
    build_meta_matrix,
    ensemble_meta_matrix,
    group_kfold,
    predict_ensemble,
    r_squared,
    train_ensemble,
)
from .features import GROUP_NAMES, PooledMatrix, assemble
from .gbdt import GbdtConfig, fit, predict_matrix
from .heads import calibrate_beta, stress_label, stress_probability
from .timeseries import AlignedFrame
from .twin import TwinParams, TwinRunConfig, run_twin
from .uncertainty import calibrate_alpha, interval, picp, replica_predictions, bootstrap_fit

logger = logging.getLogger(__name__)


class EvaluationError(Exception):
    """Invalid evaluation request."""


# ---------------------------------------------------------------------------
# Metric formulas
# ---------------------------------------------------------------------------

@dataclass
class FoldMetrics:
    n_rows: int
    mae: float
    rmse: float
    r2: float | None
    r2_reason: str | None = None
    picp: float | None = None
    f1: float | None = None
    precision: float | None = None
    recall: float | None = None
    accuracy: float | None = None
    auc: float | None = None


def auc_midrank(labels_true: np.ndarray, scores: np.ndarray) -> float | None:
    """Rank-based AUC (trapezoidal ROC with midrank tie handling)."""
    labels_true = np.asarray(labels_true).astype(int)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(labels_true.sum())
    n_neg = labels_true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    ranks[order] = np.arange(1, scores.size + 1, dtype=float)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    rank_sum = float(ranks[labels_true == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute_metrics(
    y_true,
    y_pred,
    lo=None,
    hi=None,
    labels_true=None,
    labels_pred=None,
    probs=None,
) -> FoldMetrics:
    """MAE/RMSE/R2 plus PICP and classification scores where inputs allow."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.size == 0 or y_true.shape != y_pred.shape:
        raise EvaluationError("y_true and y_pred must be aligned and nonempty")
    err = y_true - y_pred
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    if float(np.var(y_true)) == 0.0:
        r2, reason = None, "zero variance in y_true"
    else:
        r2, reason = r_squared(y_true, y_pred), None
    out = FoldMetrics(n_rows=y_true.size, mae=mae, rmse=rmse, r2=r2, r2_reason=reason)
    if lo is not None and hi is not None:
        out.picp = picp(y_true, lo, hi)
    if labels_true is not None and labels_pred is not None:
        lt = np.asarray(labels_true).astype(int)
        lp = np.asarray(labels_pred).astype(int)
        tp = float(np.sum((lt == 1) & (lp == 1)))
        fp = float(np.sum((lt == 0) & (lp == 1)))
        fn = float(np.sum((lt == 1) & (lp == 0)))
        tn = float(np.sum((lt == 0) & (lp == 0)))
        out.precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        out.recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        if out.precision + out.recall > 0:
            out.f1 = 2 * out.precision * out.recall / (out.precision + out.recall)
        else:
            out.f1 = 0.0
        out.accuracy = (tp + tn) / lt.size
        if probs is not None:
            out.auc = auc_midrank(lt, probs)
    return out


_METRIC_FIELDS = ("mae", "rmse", "r2", "picp", "f1", "precision", "recall", "accuracy", "auc")


@dataclass
class MetricReport:
    per_fold: list[FoldMetrics]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in _METRIC_FIELDS:
            values = [getattr(f, name) for f in self.per_fold if getattr(f, name) is not None]
            if values:
                self.mean[name] = float(np.mean(values))
                self.std[name] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0

    def summary(self) -> str:
        lines = []
        for name in _METRIC_FIELDS:
            if name in self.mean:
                lines.append(f"{name:9s} {self.mean[name]:.4f} +/- {self.std[name]:.4f}")
        lines.append(f"folds     {len(self.per_fold)}")
        return "\n".join(lines)

    def csv(self) -> str:
        header = "fold," + ",".join(_METRIC_FIELDS) + ",n_rows"
        rows = [header]
        for i, f in enumerate(self.per_fold):
            cells = [str(i)]
            for name in _METRIC_FIELDS:
                v = getattr(f, name)
                cells.append("" if v is None else repr(v))
            cells.append(str(f.n_rows))
            rows.append(",".join(cells))
        for tag, store in (("mean", self.mean), ("std", self.std)):
            cells = [tag]
            for name in _METRIC_FIELDS:
                cells.append(repr(store[name]) if name in store else "")
            cells.append("")
            rows.append(",".join(cells))
        return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Pipeline configuration and feature computation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 42
    k_folds: int = 5
    expert: GbdtConfig = field(
        default_factory=lambda: GbdtConfig(n_trees=120, max_leaves=31, min_samples_leaf=20)
    )
    tuner_budget: int = 6
    meta_trees_cap: int | None = None
    bootstrap_b: int = 30
    replica_trees_cap: int = 150
    target_coverage: float = 0.95
    sigma_min: float = 0.03
    z_alpha: float = 1.96
    theta_stress: float = 38.8
    horizon_minutes: int = 120
    twin: TwinRunConfig = field(default_factory=TwinRunConfig)
    twin_params: TwinParams = field(default_factory=TwinParams)
    include_env_milk_in_global: bool = False
    use_dt_features: bool = True
    jobs: int = 1


def _feature_worker(args):
    frame, cfg = args
    dt = run_twin(frame, p0=cfg.twin_params, cfg=cfg.twin) if cfg.use_dt_features else None
    return assemble(frame, dt, horizon=cfg.horizon_minutes, tau=cfg.theta_stress)


def features_from_frames(frames: list[AlignedFrame], cfg: PipelineConfig) -> PooledMatrix:
    """Twin pass plus feature assembly per cow; parallel across cows."""
    matrices = parallel_map(_feature_worker, [(f, cfg) for f in frames], cfg.jobs)
    return PooledMatrix.from_matrices(matrices)


# ---------------------------------------------------------------------------
# Training one bundle (experts + meta + bootstrap + calibration)
# ---------------------------------------------------------------------------

def train_bundle(pooled: PooledMatrix, cfg: PipelineConfig) -> EnsembleBundle:
    """Full training stage on one cow set: stack, replicas, calibration.

    Interval and stress calibration use the meta stage's out-of-fold
    predictions: every (forecast, label) pair comes from a model that never
    saw that row's label, so no extra cows are sacrificed to a holdout.
    """
    inner_k = min(cfg.k_folds, len(set(pooled.cow_ids)))
    em = train_ensemble(
        pooled,
        k=inner_k,
        expert_cfg=cfg.expert,
        tuner_budget=cfg.tuner_budget,
        seed=cfg.seed,
        include_env_milk_in_global=cfg.include_env_milk_in_global,
        meta_trees_cap=cfg.meta_trees_cap,
    )
    meta_x, _ = build_meta_matrix(
        em.experts, pooled, use_oof=True, global_columns=em.global_columns
    )
    # Dispersion-oriented replicas: near-interpolating members let the
    # cow-blocked bootstrap spread track the label-noise scale instead of
    # averaging it away; the calibrated scale absorbs the remaining ratio.
    replica_cfg = GbdtConfig(
        n_trees=cfg.replica_trees_cap,
        learning_rate=0.2,
        max_leaves=63,
        min_samples_leaf=2,
        bagging_fraction=0.6,
        feature_fraction=0.8,
        n_bins=cfg.expert.n_bins,
        seed=cfg.seed,
    )
    bootstrap = bootstrap_fit(
        meta_x,
        pooled.label_cbt_future,
        pooled.cow_ids,
        replica_cfg,
        em.meta_manifest,
        b=cfg.bootstrap_b,
        seed=cfg.seed,
    )

    y = pooled.label_cbt_future
    cal_rows = ~np.isnan(y) & ~np.isnan(em.meta_oof)
    sigma_cal = replica_predictions(bootstrap, meta_x[cal_rows]).std(axis=0, ddof=1)
    calibration = calibrate_alpha(
        sigma_cal,
        em.meta_oof[cal_rows],
        y[cal_rows],
        target_coverage=cfg.target_coverage,
        sigma_min=cfg.sigma_min,
        z=cfg.z_alpha,
    )
    stress_known = cal_rows & ~np.isnan(pooled.label_stress)
    beta = calibrate_beta(
        em.meta_oof[stress_known],
        pooled.label_stress[stress_known].astype(int),
        cfg.theta_stress,
    )
    return EnsembleBundle(
        ensemble=em,
        bootstrap=bootstrap,
        calibration=calibration,
        beta=beta,
        theta=cfg.theta_stress,
    )


def score_rows(bundle: EnsembleBundle, rows: PooledMatrix) -> FoldMetrics:
    """Metrics of one bundle on labeled evaluation rows.

    Refuses to score rows of cows the bundle's stack was trained on; that is
    always an evaluation defect, not a use case.
    """
    audit_disjoint(bundle.ensemble.fold_spec.cows, sorted(set(np.asarray(rows.cow_ids, dtype=str))))
    labeled = ~np.isnan(rows.label_cbt_future)
    rows = rows.subset(labeled)
    if rows.n_rows == 0:
        raise EvaluationError("no labeled rows to score")
    y_true = rows.label_cbt_future
    y_hat = predict_ensemble(bundle.ensemble, rows)
    meta_x = ensemble_meta_matrix(bundle.ensemble, rows)
    sigma = replica_predictions(bundle.bootstrap, meta_x).std(axis=0, ddof=1)
    lo, hi = interval(y_hat, sigma, bundle.calibration)
    stress_known = ~np.isnan(rows.label_stress)
    labels_true = rows.label_stress[stress_known].astype(int)
    labels_pred = stress_label(y_hat[stress_known], bundle.theta)
    probs = stress_probability(y_hat[stress_known], bundle.theta, bundle.beta)
    m_interval = compute_metrics(y_true, y_hat, lo, hi)
    m_class = compute_metrics(
        y_true[stress_known],
        y_hat[stress_known],
        labels_true=labels_true,
        labels_pred=labels_pred,
        probs=probs,
    )
    m_interval.f1 = m_class.f1
    m_interval.precision = m_class.precision
    m_interval.recall = m_class.recall
    m_interval.accuracy = m_class.accuracy
    m_interval.auc = m_class.auc
    return m_interval


@dataclass
class CvDetail:
    """Pooled held-out predictions: every row scored by a fold that never saw its cow."""

    cow_ids: np.ndarray
    timestamps: np.ndarray
    y_true: np.ndarray
    y_hat: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    p_stress: np.ndarray
    labels_true: np.ndarray
    labels_pred: np.ndarray

    def pooled_r2(self) -> float:
        return r_squared(self.y_true, self.y_hat)

    def pooled_picp(self) -> float:
        return picp(self.y_true, self.lo, self.hi)


def _cv_fold_worker(args):
    pooled, cfg, folds, f = args
    eval_cows = folds.cows_in(f)
    train_cows = sorted(set(folds.cows) - set(eval_cows))
    audit_disjoint(train_cows, eval_cows)
    train_mask = np.isin(pooled.cow_ids.astype(str), train_cows)
    bundle = train_bundle(pooled.subset(train_mask), cfg)
    eval_rows = pooled.subset(~train_mask)
    metrics = score_rows(bundle, eval_rows)

    labeled = ~np.isnan(eval_rows.label_cbt_future)
    rows = eval_rows.subset(labeled)
    y_hat = predict_ensemble(bundle.ensemble, rows)
    meta_x = ensemble_meta_matrix(bundle.ensemble, rows)
    sigma = replica_predictions(bundle.bootstrap, meta_x).std(axis=0, ddof=1)
    lo, hi = interval(y_hat, sigma, bundle.calibration)
    detail = CvDetail(
        cow_ids=rows.cow_ids,
        timestamps=rows.timestamps,
        y_true=rows.label_cbt_future,
        y_hat=y_hat,
        lo=lo,
        hi=hi,
        p_stress=stress_probability(y_hat, bundle.theta, bundle.beta),
        labels_true=rows.label_stress,
        labels_pred=stress_label(y_hat, bundle.theta).astype(float),
    )
    return metrics, detail


def run_cv_detailed(pooled: PooledMatrix, cfg: PipelineConfig) -> tuple[MetricReport, CvDetail]:
    """run_cv plus the pooled held-out row predictions from every fold."""
    cows = sorted(set(pooled.cow_ids))
    folds = group_kfold(cows, cfg.k_folds, cfg.seed)
    args = [(pooled, cfg, folds, f) for f in range(cfg.k_folds)]
    results = parallel_map(_cv_fold_worker, args, cfg.jobs)
    per_fold = [m for m, _ in results]
    details = [d for _, d in results]
    pooled_detail = CvDetail(
        cow_ids=np.concatenate([d.cow_ids for d in details]),
        timestamps=np.concatenate([d.timestamps for d in details]),
        y_true=np.concatenate([d.y_true for d in details]),
        y_hat=np.concatenate([d.y_hat for d in details]),
        lo=np.concatenate([d.lo for d in details]),
        hi=np.concatenate([d.hi for d in details]),
        p_stress=np.concatenate([d.p_stress for d in details]),
        labels_true=np.concatenate([d.labels_true for d in details]),
        labels_pred=np.concatenate([d.labels_pred for d in details]),
    )
    return MetricReport(per_fold=per_fold), pooled_detail


def run_cv(pooled: PooledMatrix, cfg: PipelineConfig) -> MetricReport:
    """Train the full pipeline per fold and score the held-out cows."""
    report, _ = run_cv_detailed(pooled, cfg)
    return report


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    name: str
    report: MetricReport


def _single_group_fold_worker(args):
    pooled, cfg, folds, f, names = args
    eval_cows = folds.cows_in(f)
    train_mask = ~np.isin(pooled.cow_ids.astype(str), eval_cows)
    y = pooled.label_cbt_future
    x_matrix = pooled.matrix(names)
    labeled_train = train_mask & ~np.isnan(y)
    model = fit(x_matrix[labeled_train], y[labeled_train], cfg.expert, names)
    eval_mask = ~train_mask & ~np.isnan(y)
    y_hat = predict_matrix(model, x_matrix[eval_mask])
    stress = pooled.label_stress[eval_mask]
    known = ~np.isnan(stress)
    return compute_metrics(
        y[eval_mask],
        y_hat,
        labels_true=stress[known].astype(int),
        labels_pred=stress_label(y_hat[known], cfg.theta_stress),
        probs=stress_probability(y_hat[known], cfg.theta_stress),
    )


def ablate_feature_groups(
    pooled: PooledMatrix, cfg: PipelineConfig, all_groups_report: MetricReport | None = None
) -> list[AblationRow]:
    """One single-expert pipeline per feature group plus the full stack.

    Folds are identical across rows (same cows, same seed) so comparisons are
    controlled. Single-group rows have no interval machinery, so PICP is
    absent there. A precomputed full-stack report may be passed to avoid
    repeating the expensive run.
    """
    cows = sorted(set(pooled.cow_ids))
    folds = group_kfold(cows, cfg.k_folds, cfg.seed)
    rows: list[AblationRow] = []
    present = {g.name: g for g in pooled.groups}
    for name in GROUP_NAMES:
        if name not in present:
            continue
        names = [c for c in present[name].columns if c in pooled.columns]
        args = [(pooled, cfg, folds, f, names) for f in range(cfg.k_folds)]
        per_fold = parallel_map(_single_group_fold_worker, args, cfg.jobs)
        rows.append(AblationRow(name=name, report=MetricReport(per_fold=per_fold)))
    if all_groups_report is None:
        all_groups_report = run_cv(pooled, cfg)
    rows.append(AblationRow(name="all", report=all_groups_report))
    return rows


def improvement_error_pct(with_value: float, without_value: float) -> float:
    """Relative improvement of an error metric when the component is added."""
    return (without_value - with_value) / without_value * 100.0


def improvement_score_pct(with_value: float, without_value: float) -> float:
    """Relative improvement of a score metric when the component is added."""
    return (with_value - without_value) / without_value * 100.0


@dataclass
class DtAblation:
    with_dt: MetricReport
    without_dt: MetricReport
    relative_pct: dict[str, float]
    absolute_delta: dict[str, float]


def ablate_digital_twin(
    pooled: PooledMatrix, cfg: PipelineConfig, with_dt_report: MetricReport | None = None
) -> DtAblation:
    """Identical pipelines with and without the dt_features group.

    Relative deltas follow the printed-table convention: error metrics as
    (without-with)/without, score metrics as (with-without)/without; absolute
    deltas are also reported since the two conventions differ.
    """
    if "dt_features" not in [g.name for g in pooled.groups]:
        raise EvaluationError("pooled matrix lacks dt_features; run the twin first")
    with_dt = with_dt_report if with_dt_report is not None else run_cv(pooled, cfg)
    without_dt = run_cv(pooled.without_group("dt_features"), cfg)
    relative: dict[str, float] = {}
    absolute: dict[str, float] = {}
    for name in ("mae", "rmse", "r2", "picp"):
        a = with_dt.mean.get(name)
        b = without_dt.mean.get(name)
        if a is None or b is None:
            continue
        absolute[name] = a - b
        if name in ("mae", "rmse"):
            relative[name] = improvement_error_pct(a, b)
        else:
            relative[name] = improvement_score_pct(a, b)
    return DtAblation(
        with_dt=with_dt, without_dt=without_dt, relative_pct=relative, absolute_delta=absolute
    )


# ---------------------------------------------------------------------------
# Plot-ready report files
# ---------------------------------------------------------------------------

def roc_points(labels_true: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """(threshold, fpr, tpr) rows over the unique probability thresholds."""
    labels_true = np.asarray(labels_true).astype(int)
    probs = np.asarray(probs, dtype=float)
    n_pos = labels_true.sum()
    n_neg = labels_true.size - n_pos
    points = [(np.inf, 0.0, 0.0)]
    for thr in np.unique(probs)[::-1]:
        pred = probs >= thr
        tpr = float(np.sum(pred & (labels_true == 1))) / max(n_pos, 1)
        fpr = float(np.sum(pred & (labels_true == 0))) / max(n_neg, 1)
        points.append((float(thr), fpr, tpr))
    return np.array(points)


def rolling_metric_series(timestamps, y_true, y_pred, window: int = 240):
    """Windowed MAE/RMSE over time, ordered by timestamp."""
    order = np.argsort(timestamps, kind="mergesort")
    t = np.asarray(timestamps)[order]
    err = np.abs(np.asarray(y_true)[order] - np.asarray(y_pred)[order])
    rows = []
    for start in range(0, t.size - window + 1, window):
        seg = err[start : start + window]
        rows.append((int(t[start]), float(seg.mean()), float(np.sqrt(np.mean(seg * seg)))))
    return np.array(rows) if rows else np.empty((0, 3))


def write_report_files(out_dir, report: MetricReport, extras: dict | None = None) -> None:
    """Delimited report plus a human-readable summary; plot data if supplied."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(report.csv(), encoding="utf-8")
    (out_dir / "summary.txt").write_text(report.summary() + "\n", encoding="utf-8")
    if not extras:
        return
    if "roc" in extras:
        lines = ["threshold,fpr,tpr"]
        lines += [f"{repr(a)},{repr(b)},{repr(c)}" for a, b, c in extras["roc"]]
        (out_dir / "roc_points.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if "residuals" in extras:
        t, r = extras["residuals"]
        lines = ["t_utc_minutes,residual_c"]
        lines += [f"{int(a)},{repr(float(b))}" for a, b in zip(t, r)]
        (out_dir / "residuals.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if "rolling" in extras:
        lines = ["t_utc_minutes,mae,rmse"]
        lines += [f"{int(a)},{repr(b)},{repr(c)}" for a, b, c in extras["rolling"]]
        (out_dir / "rolling_metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

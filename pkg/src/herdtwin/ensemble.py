"""Three-stage stacked ensemble: per-group experts, OOF meta-features, meta-model.

Stage 1 trains one boosted-tree expert per feature group. Stage 2 collects
out-of-fold predictions — for every training row, the expert that produced
its meta-feature never saw that row's label — weighted by clipped validation
R^2:

    w_g = max(0, R2_g) / sum_j max(0, R2_j)

Stage 3 concatenates the weighted predictions with global context columns and
fits a tuned meta-model. Folds are grouped by cow throughout, so no animal
ever straddles a train/validation boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .features import PooledMatrix
from .gbdt import (
    GbdtConfig,
    GbdtModel,
    deserialize_model,
    fit,
    predict_matrix,
    serialize_model,
)
from .uncertainty import BootstrapSet, CalibrationConstants

logger = logging.getLogger(__name__)

ENSEMBLE_MAGIC = "TWINENS v1"

#: Meta-feature global context: cyclic time only by default (the config
#: switch below widens it with environment and yield summaries).
GLOBAL_COLUMNS_DEFAULT = ("sin_hour", "cos_hour", "day_of_week")
GLOBAL_COLUMNS_EXTENDED = GLOBAL_COLUMNS_DEFAULT + ("thi_indoor", "milk_kg")


class EnsembleError(Exception):
    """Configuration or schema failure in the stacking pipeline."""


class LeakError(EnsembleError):
    """A train/evaluation cow-disjointness audit failed."""


# ---------------------------------------------------------------------------
# Grouped folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSpec:
    """Cow -> fold assignment; every row of a cow lives in exactly one fold."""

    k: int
    assignment: dict[str, int]

    def fold_of_rows(self, cow_ids: np.ndarray) -> np.ndarray:
        return np.array([self.assignment[c] for c in cow_ids], dtype=np.int64)

    def cows_in(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.assignment.items() if f == fold)

    @property
    def cows(self) -> list[str]:
        return sorted(self.assignment)


def group_kfold(cow_ids, k: int, seed: int = 0) -> FoldSpec:
    """Assign cows to k folds, cow-counts differing by at most one.

    The assignment is canonical: cows are sorted before the seeded shuffle,
    so permuting the input order changes nothing.
    """
    cows = sorted(set(cow_ids))
    if len(cows) < k:
        raise EnsembleError(f"need at least k={k} cows, got {len(cows)}")
    rng = np.random.default_rng([seed, 77])
    order = rng.permutation(len(cows))
    assignment = {cows[int(idx)]: i % k for i, idx in enumerate(order)}
    return FoldSpec(k=k, assignment=assignment)


# ---------------------------------------------------------------------------
# Stage 1: experts
# ---------------------------------------------------------------------------

@dataclass
class ExpertSet:
    experts: dict[str, GbdtModel]
    oof_pred: dict[str, np.ndarray]
    val_r2: dict[str, float]
    weights: dict[str, float]
    uniform_fallback: bool = False
    group_columns: dict[str, tuple[str, ...]] = field(default_factory=dict)


def r_squared(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    ss_res = float(np.sum((y_true - y_pred) ** 2))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    if ss_tot == 0.0:
        raise EnsembleError("R^2 undefined: zero variance in y_true")
    return 1.0 - ss_res / ss_tot


def expert_weights(val_r2: dict[str, float]) -> tuple[dict[str, float], bool]:
    """Clipped-R^2 normalization; uniform fallback when nothing is positive."""
    clipped = {g: max(0.0, r2) for g, r2 in val_r2.items()}
    total = sum(clipped.values())
    if total <= 0.0:
        logger.warning("all expert R^2 <= 0; falling back to uniform weights")
        n = len(val_r2)
        return {g: 1.0 / n for g in val_r2}, True
    return {g: v / total for g, v in clipped.items()}, False


def train_experts(pooled: PooledMatrix, folds: FoldSpec, cfg: GbdtConfig) -> ExpertSet:
    """Per-group OOF protocol: fit on k-1 folds, predict the held-out fold.

    Validation R^2 per group is computed on the pooled OOF predictions; the
    final expert refits on all labeled rows. Groups whose columns are absent
    from the matrix are excluded with a warning and weight 0.
    """
    if folds.k < 2:
        raise EnsembleError("need at least 2 folds")
    y = pooled.label_cbt_future
    labeled = ~np.isnan(y)
    row_folds = folds.fold_of_rows(pooled.cow_ids)
    experts: dict[str, GbdtModel] = {}
    oof: dict[str, np.ndarray] = {}
    val_r2: dict[str, float] = {}
    group_columns: dict[str, tuple[str, ...]] = {}
    for group in pooled.groups:
        names = [c for c in group.columns if c in pooled.columns]
        if not names:
            logger.warning("group %s has no columns present; weight 0", group.name)
            continue
        x_matrix = pooled.matrix(names)
        preds = np.full(pooled.n_rows, np.nan)
        for f in range(folds.k):
            train_rows = labeled & (row_folds != f)
            test_rows = row_folds == f
            if not train_rows.any() or not test_rows.any():
                continue
            model = fit(x_matrix[train_rows], y[train_rows], cfg, names)
            preds[test_rows] = predict_matrix(model, x_matrix[test_rows])
        oof[group.name] = preds
        scorable = labeled & ~np.isnan(preds)
        val_r2[group.name] = r_squared(y[scorable], preds[scorable])
        experts[group.name] = fit(x_matrix[labeled], y[labeled], cfg, names)
        group_columns[group.name] = tuple(names)
    if not experts:
        raise EnsembleError("no feature group had any columns to train on")
    weights, fallback = expert_weights(val_r2)
    return ExpertSet(
        experts=experts,
        oof_pred=oof,
        val_r2=val_r2,
        weights=weights,
        uniform_fallback=fallback,
        group_columns=group_columns,
    )


# ---------------------------------------------------------------------------
# Stage 2: meta matrix
# ---------------------------------------------------------------------------

def meta_manifest_for(es: ExpertSet, global_columns) -> tuple[str, ...]:
    return tuple(f"meta_{g}" for g in sorted(es.experts)) + tuple(global_columns)


def build_meta_matrix(
    es: ExpertSet,
    pooled: PooledMatrix,
    use_oof: bool,
    global_columns=GLOBAL_COLUMNS_DEFAULT,
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Weighted expert predictions concatenated with global context columns.

    Training rows use OOF values (use_oof=True); inference rows use the
    final experts. A zero-weight group contributes an identically-zero
    column.
    """
    manifest = meta_manifest_for(es, global_columns)
    cols = []
    for g in sorted(es.experts):
        if use_oof:
            pred = es.oof_pred[g]
        else:
            names = es.group_columns[g]
            missing = [c for c in names if c not in pooled.columns]
            if missing:
                raise EnsembleError(f"group {g} columns missing at inference: {missing}")
            pred = predict_matrix(es.experts[g], pooled.matrix(names))
        cols.append(es.weights[g] * pred)
    for name in global_columns:
        if name not in pooled.columns:
            raise EnsembleError(f"global meta column {name} missing from matrix")
        cols.append(pooled.columns[name])
    return np.column_stack(cols), manifest


# ---------------------------------------------------------------------------
# Stage 3: tuned meta-model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialRecord:
    index: int
    params: dict
    objective: float


TUNER_SPACE = {
    "n_trees": (100, 800),
    "learning_rate": (0.02, 0.2),  # log-uniform
    "max_leaves": (7, 63),
    "min_samples_leaf": (5, 50),
    "feature_fraction": (0.6, 1.0),
    "bagging_fraction": (0.6, 1.0),
}


def _sample_config(rng: np.random.Generator, seed: int) -> GbdtConfig:
    lo, hi = TUNER_SPACE["learning_rate"]
    return GbdtConfig(
        n_trees=int(rng.integers(TUNER_SPACE["n_trees"][0], TUNER_SPACE["n_trees"][1] + 1)),
        learning_rate=float(np.exp(rng.uniform(np.log(lo), np.log(hi)))),
        max_leaves=int(rng.integers(TUNER_SPACE["max_leaves"][0], TUNER_SPACE["max_leaves"][1] + 1)),
        min_samples_leaf=int(
            rng.integers(TUNER_SPACE["min_samples_leaf"][0], TUNER_SPACE["min_samples_leaf"][1] + 1)
        ),
        feature_fraction=float(rng.uniform(*TUNER_SPACE["feature_fraction"])),
        bagging_fraction=float(rng.uniform(*TUNER_SPACE["bagging_fraction"])),
        seed=seed,
    )


def tune_and_train_meta(
    meta_x: np.ndarray,
    y: np.ndarray,
    row_folds: np.ndarray,
    manifest,
    budget: int = 8,
    seed: int = 0,
    n_trees_cap: int | None = None,
) -> tuple[GbdtModel, list[TrialRecord], np.ndarray]:
    """Seeded random search over the meta-model's config space.

    Objective: mean cross-fold validation R^2 on the cow-grouped folds. The
    best trial (ties to the earliest) is refit on all labeled rows. Every
    trial is logged. n_trees_cap bounds the sampled tree count for budgeted
    runs without narrowing the rest of the space.

    Also returns the best config's out-of-fold predictions (NaN where no fold
    model covered a row): validation-grade forecasts of the meta stage used
    downstream for interval and stress-head calibration.
    """
    if budget < 1:
        raise EnsembleError("tuner budget must be >= 1")
    labeled = ~np.isnan(y)
    k = int(row_folds.max()) + 1
    trials: list[TrialRecord] = []
    best: tuple[float, int, GbdtConfig] | None = None
    for t in range(budget):
        rng = np.random.default_rng([seed, 500 + t])
        cfg = _sample_config(rng, seed=seed * 1009 + t)
        if n_trees_cap is not None and cfg.n_trees > n_trees_cap:
            cfg = replace(cfg, n_trees=n_trees_cap)
        scores = []
        for f in range(k):
            train_rows = labeled & (row_folds != f)
            test_rows = labeled & (row_folds == f)
            if not train_rows.any() or not test_rows.any():
                continue
            model = fit(meta_x[train_rows], y[train_rows], cfg, manifest)
            scores.append(r_squared(y[test_rows], predict_matrix(model, meta_x[test_rows])))
        objective = float(np.mean(scores)) if scores else -np.inf
        trials.append(TrialRecord(index=t, params=_config_params(cfg), objective=objective))
        if best is None or objective > best[0]:
            best = (objective, t, cfg)
    oof = np.full(y.size, np.nan)
    for f in range(k):
        train_rows = labeled & (row_folds != f)
        test_rows = row_folds == f
        if not train_rows.any() or not test_rows.any():
            continue
        model = fit(meta_x[train_rows], y[train_rows], best[2], manifest)
        oof[test_rows] = predict_matrix(model, meta_x[test_rows])
    final = fit(meta_x[labeled], y[labeled], best[2], manifest)
    return final, trials, oof


def _config_params(cfg: GbdtConfig) -> dict:
    return {
        "n_trees": cfg.n_trees,
        "learning_rate": cfg.learning_rate,
        "max_leaves": cfg.max_leaves,
        "min_samples_leaf": cfg.min_samples_leaf,
        "feature_fraction": cfg.feature_fraction,
        "bagging_fraction": cfg.bagging_fraction,
        "seed": cfg.seed,
    }


# ---------------------------------------------------------------------------
# The trained stack
# ---------------------------------------------------------------------------

@dataclass
class EnsembleModel:
    experts: ExpertSet
    meta: GbdtModel
    meta_manifest: tuple[str, ...]
    tuner_log: list[TrialRecord]
    fold_spec: FoldSpec
    global_columns: tuple[str, ...] = GLOBAL_COLUMNS_DEFAULT
    #: best-config out-of-fold meta predictions over the training rows;
    #: training-time artifact for calibration, not serialized
    meta_oof: np.ndarray | None = None


def train_ensemble(
    pooled: PooledMatrix,
    k: int = 5,
    expert_cfg: GbdtConfig | None = None,
    tuner_budget: int = 8,
    seed: int = 0,
    include_env_milk_in_global: bool = False,
    meta_trees_cap: int | None = None,
) -> EnsembleModel:
    """Full stage-1..3 training on pooled multi-cow rows."""
    expert_cfg = expert_cfg or GbdtConfig(n_trees=120, max_leaves=31, min_samples_leaf=20, seed=seed)
    folds = group_kfold(pooled.cow_ids, k, seed)
    es = train_experts(pooled, folds, expert_cfg)
    global_columns = (
        GLOBAL_COLUMNS_EXTENDED if include_env_milk_in_global else GLOBAL_COLUMNS_DEFAULT
    )
    meta_x, manifest = build_meta_matrix(es, pooled, use_oof=True, global_columns=global_columns)
    row_folds = folds.fold_of_rows(pooled.cow_ids)
    meta, log, meta_oof = tune_and_train_meta(
        meta_x,
        pooled.label_cbt_future,
        row_folds,
        manifest,
        budget=tuner_budget,
        seed=seed,
        n_trees_cap=meta_trees_cap,
    )
    return EnsembleModel(
        experts=es,
        meta=meta,
        meta_manifest=manifest,
        tuner_log=log,
        fold_spec=folds,
        global_columns=global_columns,
        meta_oof=meta_oof,
    )


def ensemble_meta_matrix(em: EnsembleModel, pooled: PooledMatrix) -> np.ndarray:
    meta_x, manifest = build_meta_matrix(
        em.experts, pooled, use_oof=False, global_columns=em.global_columns
    )
    if manifest != em.meta_manifest:
        raise EnsembleError(f"meta manifest mismatch: {manifest} != {em.meta_manifest}")
    return meta_x


def predict_ensemble(em: EnsembleModel, pooled: PooledMatrix) -> np.ndarray:
    """Two-stage composition: experts -> weighted meta columns -> meta model."""
    return predict_matrix(em.meta, ensemble_meta_matrix(em, pooled))


def audit_disjoint(train_cows, eval_cows) -> None:
    overlap = set(train_cows) & set(eval_cows)
    if overlap:
        raise LeakError(f"cows in both train and eval sets: {sorted(overlap)}")


# ---------------------------------------------------------------------------
# TWINENS v1 container
# ---------------------------------------------------------------------------

@dataclass
class EnsembleBundle:
    """Everything cmd_predict needs: stack, replicas, calibration, stress head."""

    ensemble: EnsembleModel
    bootstrap: BootstrapSet | None = None
    calibration: CalibrationConstants | None = None
    beta: float = 5.0
    theta: float = 38.8


def _write_gbdt_block(lines: list[str], label: str, model: GbdtModel) -> None:
    lines.append(f"model {label}")
    lines.append(serialize_model(model).rstrip("\n"))
    lines.append("endmodel")


def serialize_bundle(bundle: EnsembleBundle) -> str:
    em = bundle.ensemble
    es = em.experts
    lines = [ENSEMBLE_MAGIC]
    lines.append(f"k {em.fold_spec.k}")
    for cow in sorted(em.fold_spec.assignment):
        lines.append(f"fold {cow} {em.fold_spec.assignment[cow]}")
    lines.append(f"groups {','.join(sorted(es.experts))}")
    for g in sorted(es.experts):
        lines.append(f"group_columns {g} {','.join(es.group_columns[g])}")
        lines.append(f"val_r2 {g} {repr(es.val_r2[g])}")
        lines.append(f"weight {g} {repr(es.weights[g])}")
    lines.append(f"uniform_fallback {int(es.uniform_fallback)}")
    lines.append(f"global_columns {','.join(em.global_columns)}")
    lines.append(f"meta_manifest {','.join(em.meta_manifest)}")
    for trial in em.tuner_log:
        params = " ".join(f"{k}={repr(v)}" for k, v in trial.params.items())
        lines.append(f"trial {trial.index} {repr(trial.objective)} {params}")
    lines.append(f"beta {repr(bundle.beta)}")
    lines.append(f"theta {repr(bundle.theta)}")
    if bundle.calibration is not None:
        cc = bundle.calibration
        lines.append(
            f"calibration {repr(cc.alpha)} {repr(cc.sigma_min)} {repr(cc.z_alpha)} "
            f"{int(cc.under_coverage)}"
        )
    for g in sorted(es.experts):
        _write_gbdt_block(lines, f"expert:{g}", es.experts[g])
    _write_gbdt_block(lines, "meta", em.meta)
    if bundle.bootstrap is not None:
        lines.append(f"bootstrap_b {bundle.bootstrap.b}")
        for i, (model, bseed) in enumerate(zip(bundle.bootstrap.replicas, bundle.bootstrap.seeds)):
            lines.append(f"replica_seed {i} {bseed}")
            _write_gbdt_block(lines, f"replica:{i}", model)
    return "\n".join(lines) + "\n"


def deserialize_bundle(text: str) -> EnsembleBundle:
    lines = text.splitlines()
    if not lines or lines[0] != ENSEMBLE_MAGIC:
        found = lines[0] if lines else "<empty>"
        raise EnsembleError(f"expected {ENSEMBLE_MAGIC!r}, found {found!r}")
    k = 0
    assignment: dict[str, int] = {}
    group_columns: dict[str, tuple[str, ...]] = {}
    val_r2: dict[str, float] = {}
    weights: dict[str, float] = {}
    uniform_fallback = False
    global_columns: tuple[str, ...] = GLOBAL_COLUMNS_DEFAULT
    meta_manifest: tuple[str, ...] = ()
    trials: list[TrialRecord] = []
    beta, theta = 5.0, 38.8
    calibration = None
    models: dict[str, GbdtModel] = {}
    replica_seeds: dict[int, int] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        tag, _, rest = line.partition(" ")
        if tag == "model":
            label = rest
            block = []
            i += 1
            while lines[i] != "endmodel":
                block.append(lines[i])
                i += 1
            models[label] = deserialize_model("\n".join(block) + "\n")
            i += 1
            continue
        if tag == "k":
            k = int(rest)
        elif tag == "fold":
            cow, fold = rest.rsplit(" ", 1)
            assignment[cow] = int(fold)
        elif tag == "groups":
            pass
        elif tag == "group_columns":
            g, _, colspec = rest.partition(" ")
            group_columns[g] = tuple(colspec.split(","))
        elif tag == "val_r2":
            g, _, v = rest.partition(" ")
            val_r2[g] = float(v)
        elif tag == "weight":
            g, _, v = rest.partition(" ")
            weights[g] = float(v)
        elif tag == "uniform_fallback":
            uniform_fallback = rest == "1"
        elif tag == "global_columns":
            global_columns = tuple(rest.split(","))
        elif tag == "meta_manifest":
            meta_manifest = tuple(rest.split(","))
        elif tag == "trial":
            parts = rest.split()
            params: dict = {}
            for kv in parts[2:]:
                key, _, value = kv.partition("=")
                params[key] = float(value) if "." in value or "e" in value else int(value)
            trials.append(TrialRecord(index=int(parts[0]), params=params, objective=float(parts[1])))
        elif tag == "beta":
            beta = float(rest)
        elif tag == "theta":
            theta = float(rest)
        elif tag == "calibration":
            a, s, z, warn = rest.split()
            calibration = CalibrationConstants(
                alpha=float(a), sigma_min=float(s), z_alpha=float(z), under_coverage=warn == "1"
            )
        elif tag == "bootstrap_b":
            pass
        elif tag == "replica_seed":
            idx, _, s = rest.partition(" ")
            replica_seeds[int(idx)] = int(s)
        else:
            raise EnsembleError(f"unexpected bundle line: {line!r}")
        i += 1
    experts = {
        label.split(":", 1)[1]: model
        for label, model in models.items()
        if label.startswith("expert:")
    }
    es = ExpertSet(
        experts=experts,
        oof_pred={},
        val_r2=val_r2,
        weights=weights,
        uniform_fallback=uniform_fallback,
        group_columns=group_columns,
    )
    em = EnsembleModel(
        experts=es,
        meta=models["meta"],
        meta_manifest=meta_manifest,
        tuner_log=trials,
        fold_spec=FoldSpec(k=k, assignment=assignment),
        global_columns=global_columns,
    )
    bootstrap = None
    replica_labels = sorted(
        (label for label in models if label.startswith("replica:")),
        key=lambda s: int(s.split(":", 1)[1]),
    )
    if replica_labels:
        bootstrap = BootstrapSet(
            replicas=[models[label] for label in replica_labels],
            seeds=[replica_seeds[int(label.split(":", 1)[1])] for label in replica_labels],
        )
    return EnsembleBundle(
        ensemble=em, bootstrap=bootstrap, calibration=calibration, beta=beta, theta=theta
    )


def write_bundle(bundle: EnsembleBundle, path) -> None:
    Path(path).write_text(serialize_bundle(bundle), encoding="utf-8")


def read_bundle(path) -> EnsembleBundle:
    return deserialize_bundle(Path(path).read_text(encoding="utf-8"))


def tuner_log_text(trials: list[TrialRecord]) -> str:
    """Delimited tuner log for audit."""
    header = "trial,objective," + ",".join(TUNER_SPACE) + ",seed"
    rows = [header]
    for t in trials:
        cells = [str(t.index), repr(t.objective)]
        cells += [repr(t.params[name]) for name in TUNER_SPACE]
        cells.append(str(t.params["seed"]))
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"

"""Histogram-based gradient-boosted regression trees.

Squared-error boosting with leaf-wise growth, quantile binning, and native
missing-value routing: each split learns its default direction by scoring
both. Fitting is deterministic given the config seed regardless of column
layout or execution order, so serialized models are byte-stable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GBDT_MAGIC = "TWINGBDT v1"

_GAIN_EPS = 1e-12


class GbdtError(Exception):
    """Base error for the boosted-tree learner."""


class TrainingError(GbdtError):
    """No usable training rows."""


class SchemaError(GbdtError):
    """A prediction row does not match the model's feature manifest."""


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 150
    learning_rate: float = 0.1
    max_leaves: int = 31
    min_samples_leaf: int = 20
    feature_fraction: float = 1.0
    bagging_fraction: float = 1.0
    n_bins: int = 63
    seed: int = 0
    loss: str = "squared_error"

    def __post_init__(self):
        if self.n_trees < 0:
            raise GbdtError("n_trees must be >= 0")
        if not (0.0 < self.learning_rate <= 1.0):
            raise GbdtError("learning_rate must be in (0, 1]")
        if self.max_leaves < 2:
            raise GbdtError("max_leaves must be >= 2")
        if self.min_samples_leaf < 1:
            raise GbdtError("min_samples_leaf must be >= 1")
        for name in ("feature_fraction", "bagging_fraction"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise GbdtError(f"{name} must be in (0, 1]")
        if not (2 <= self.n_bins <= 254):
            raise GbdtError("n_bins must be in [2, 254]")
        if self.loss != "squared_error":
            raise GbdtError(f"unsupported loss {self.loss!r}")


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    miss_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)


@dataclass
class GbdtModel:
    config: GbdtConfig
    feature_manifest: tuple[str, ...]
    base_score: float
    trees: list[Tree]
    split_gains: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Binning
# ---------------------------------------------------------------------------

def _bin_edges(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Upper-open bin edges; values equal to an edge fall to its right."""
    present = values[~np.isnan(values)]
    if present.size == 0:
        return np.empty(0)
    uniq = np.unique(present)
    if uniq.size <= n_bins:
        return (uniq[:-1] + uniq[1:]) / 2.0
    qs = np.quantile(present, np.linspace(0.0, 1.0, n_bins + 1)[1:-1])
    return np.unique(qs)


def _encode(values: np.ndarray, edges: np.ndarray, missing_code: int) -> np.ndarray:
    codes = np.digitize(values, edges).astype(np.uint8)
    codes[np.isnan(values)] = missing_code
    return codes


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

class _Grower:
    """Histogram bookkeeping for one tree.

    Sibling histograms are derived by subtraction from the parent, so each
    split only scans the smaller child.
    """

    def __init__(self, codes, codes_flat, residual, cfg: GbdtConfig, edges_len, feats):
        self.codes = codes
        self.codes_flat = codes_flat  # codes + per-feature offset, int32
        self.residual = residual
        self.cfg = cfg
        self.width = cfg.n_bins + 1
        self.edges_len = edges_len  # usable thresholds per feature
        self.feats = feats
        self.n_feats = feats.size

    def hist(self, rows: np.ndarray):
        # codes_flat carries global per-feature offsets; bincount over the
        # full table, then keep the selected features' rows
        sub = self.codes_flat[rows][:, self.feats]
        flat = sub.ravel()
        size = self.codes.shape[1] * self.width
        counts = np.bincount(flat, minlength=size).reshape(-1, self.width)[self.feats]
        sums = np.bincount(
            flat, weights=np.repeat(self.residual[rows], self.n_feats), minlength=size
        ).reshape(-1, self.width)[self.feats]
        return counts, sums

    def best_split(self, n_rows: int, hist):
        """(gain, feature, bin, miss_left) of the best split, or None."""
        cfg = self.cfg
        if n_rows < 2 * cfg.min_samples_leaf:
            return None
        counts, sums = hist
        n_bins = cfg.n_bins
        cnt_miss = counts[:, n_bins][:, None].astype(np.float64)
        sum_miss = sums[:, n_bins][:, None]
        cum_cnt = np.cumsum(counts[:, :n_bins], axis=1)[:, :-1].astype(np.float64)
        cum_sum = np.cumsum(sums[:, :n_bins], axis=1)[:, :-1]
        total_cnt = float(n_rows)
        total_sum = float(sums[0].sum())  # every feature row totals the node residual
        parent = total_sum * total_sum / total_cnt

        gains = np.full((self.n_feats, n_bins - 1, 2), -np.inf)
        for d, miss_left in enumerate((True, False)):
            lc = cum_cnt + (cnt_miss if miss_left else 0.0)
            ls = cum_sum + (sum_miss if miss_left else 0.0)
            rc = total_cnt - lc
            rs = total_sum - ls
            valid = (lc >= cfg.min_samples_leaf) & (rc >= cfg.min_samples_leaf)
            with np.errstate(divide="ignore", invalid="ignore"):
                g = ls * ls / lc + rs * rs / rc - parent
            gains[:, :, d] = np.where(valid, g, -np.inf)
        # thresholds past the last real edge of a feature are not candidates
        usable = self.edges_len[self.feats]
        bins_idx = np.arange(n_bins - 1)
        gains[bins_idx[None, :] >= usable[:, None]] = -np.inf

        best = int(np.argmax(gains))
        f_idx, b, d = np.unravel_index(best, gains.shape)
        gain = gains[f_idx, b, d]
        if not np.isfinite(gain) or gain <= _GAIN_EPS:
            return None
        return float(gain), int(self.feats[f_idx]), int(b), d == 0

    def route(self, rows: np.ndarray, feature: int, b: int, miss_left: bool):
        c = self.codes[rows, feature]
        go_left = c <= b
        if miss_left:
            go_left |= c == self.cfg.n_bins
        else:
            go_left &= c != self.cfg.n_bins
        return rows[go_left], rows[~go_left]

    def child_hists(self, parent_hist, left_rows, right_rows):
        if left_rows.size <= right_rows.size:
            left = self.hist(left_rows)
            right = (parent_hist[0] - left[0], parent_hist[1] - left[1])
        else:
            right = self.hist(right_rows)
            left = (parent_hist[0] - right[0], parent_hist[1] - right[1])
        return left, right


def fit(
    x_matrix: np.ndarray,
    y: np.ndarray,
    cfg: GbdtConfig,
    feature_manifest,
) -> GbdtModel:
    """Train a boosted-tree model on rows with finite labels.

    Rows whose label is absent are excluded. Greedy histogram splits maximize
    squared-error gain; each stage fits the residuals and predictions scale
    the leaf values by the learning rate.
    """
    manifest = tuple(feature_manifest)
    x_matrix = np.asarray(x_matrix, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    usable = ~np.isnan(y)
    x_matrix = x_matrix[usable]
    y = y[usable]
    n, n_features = x_matrix.shape
    if n_features != len(manifest):
        raise GbdtError(f"matrix has {n_features} columns, manifest {len(manifest)}")
    if n == 0:
        raise TrainingError("no rows with labels to train on")

    edges = [_bin_edges(x_matrix[:, j], cfg.n_bins) for j in range(n_features)]
    edges_len = np.array([e.size for e in edges], dtype=np.int64)
    codes = np.empty((n, n_features), dtype=np.uint8)
    for j in range(n_features):
        codes[:, j] = _encode(x_matrix[:, j], edges[j], cfg.n_bins)
    codes_flat = codes.astype(np.int32) + np.arange(n_features, dtype=np.int32) * (cfg.n_bins + 1)

    base_score = float(y.mean())
    pred = np.full(n, base_score)
    rng = np.random.default_rng(cfg.seed)
    trees: list[Tree] = []
    split_gains: dict[str, float] = {}

    n_bag = max(1, int(round(cfg.bagging_fraction * n)))
    n_feat = max(1, int(round(cfg.feature_fraction * n_features)))

    for _ in range(cfg.n_trees):
        if cfg.bagging_fraction < 1.0:
            bag = np.sort(rng.choice(n, size=n_bag, replace=False))
        else:
            bag = np.arange(n)
        if cfg.feature_fraction < 1.0:
            feats = np.sort(rng.choice(n_features, size=n_feat, replace=False))
        else:
            feats = np.arange(n_features)
        residual = y - pred
        grower = _Grower(codes, codes_flat, residual, cfg, edges_len, feats)

        feature_ids = [-1]
        thresholds = [0.0]
        threshold_bins = [0]
        miss_lefts = [False]
        lefts = [-1]
        rights = [-1]
        values = [float(residual[bag].mean())]
        node_rows = {0: bag}
        update = np.zeros(n)
        # growable leaves: (node_id, rows, histogram, cached best split)
        candidates = []
        root_hist = grower.hist(bag)
        first = grower.best_split(bag.size, root_hist)
        if first is not None:
            candidates.append((0, bag, root_hist, first))
        n_leaves = 1
        while candidates and n_leaves < cfg.max_leaves:
            # best-first: highest gain, ties to the earliest-created node
            idx = max(
                range(len(candidates)),
                key=lambda i: (candidates[i][3][0], -candidates[i][0]),
            )
            node_id, rows, hist, (gain, feature, b, miss_left) = candidates.pop(idx)
            left_rows, right_rows = grower.route(rows, feature, b, miss_left)
            left_hist, right_hist = grower.child_hists(hist, left_rows, right_rows)
            thr = edges[feature][b] if b < edges[feature].size else np.inf
            feature_ids[node_id] = feature
            thresholds[node_id] = float(thr)
            threshold_bins[node_id] = b
            miss_lefts[node_id] = miss_left
            name = manifest[feature]
            split_gains[name] = split_gains.get(name, 0.0) + gain
            for child_rows, child_hist, slot in (
                (left_rows, left_hist, "left"),
                (right_rows, right_hist, "right"),
            ):
                child_id = len(feature_ids)
                feature_ids.append(-1)
                thresholds.append(0.0)
                threshold_bins.append(0)
                miss_lefts.append(False)
                lefts.append(-1)
                rights.append(-1)
                values.append(float(residual[child_rows].mean()))
                node_rows[child_id] = child_rows
                if slot == "left":
                    lefts[node_id] = child_id
                else:
                    rights[node_id] = child_id
                child_split = grower.best_split(child_rows.size, child_hist)
                if child_split is not None:
                    candidates.append((child_id, child_rows, child_hist, child_split))
            del node_rows[node_id]
            n_leaves += 1
        for node_id, rows in node_rows.items():
            update[rows] = values[node_id]
        tree = Tree(
            feature=np.array(feature_ids, dtype=np.int32),
            threshold=np.array(thresholds),
            miss_left=np.array(miss_lefts, dtype=bool),
            left=np.array(lefts, dtype=np.int32),
            right=np.array(rights, dtype=np.int32),
            value=np.array(values),
        )
        if bag.size < n:
            # out-of-bag rows still move with the ensemble
            update = _apply_tree_binned(
                tree, np.array(threshold_bins), codes, cfg.n_bins
            )
        pred += cfg.learning_rate * update
        trees.append(tree)

    return GbdtModel(
        config=cfg,
        feature_manifest=manifest,
        base_score=base_score,
        trees=trees,
        split_gains=split_gains,
    )


def _apply_tree_binned(tree: Tree, threshold_bins: np.ndarray, codes: np.ndarray, n_bins: int) -> np.ndarray:
    node = np.zeros(codes.shape[0], dtype=np.int32)
    for u in range(tree.n_nodes):
        f = tree.feature[u]
        if f < 0:
            continue
        at = node == u
        if not at.any():
            continue
        c = codes[at, f]
        go_left = c <= threshold_bins[u]
        if tree.miss_left[u]:
            go_left |= c == n_bins
        else:
            go_left &= c != n_bins
        node[at] = np.where(go_left, tree.left[u], tree.right[u])
    return tree.value[node]


def fit_columns(columns: dict[str, np.ndarray], y: np.ndarray, cfg: GbdtConfig, manifest=None) -> GbdtModel:
    manifest = tuple(manifest) if manifest is not None else tuple(columns)
    matrix = np.column_stack([columns[name] for name in manifest])
    return fit(matrix, y, cfg, manifest)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _apply_tree(tree: Tree, x_matrix: np.ndarray) -> np.ndarray:
    node = np.zeros(x_matrix.shape[0], dtype=np.int32)
    for u in range(tree.n_nodes):
        f = tree.feature[u]
        if f < 0:
            continue
        at = node == u
        if not at.any():
            continue
        v = x_matrix[at, f]
        miss = np.isnan(v)
        with np.errstate(invalid="ignore"):
            below = v < tree.threshold[u]
        go_left = np.where(miss, tree.miss_left[u], below)
        node[at] = np.where(go_left, tree.left[u], tree.right[u])
    return tree.value[node]


def predict_matrix(model: GbdtModel, x_matrix: np.ndarray) -> np.ndarray:
    x_matrix = np.asarray(x_matrix, dtype=np.float64)
    if x_matrix.ndim != 2 or x_matrix.shape[1] != len(model.feature_manifest):
        raise SchemaError(
            f"expected {len(model.feature_manifest)} feature columns, got shape {x_matrix.shape}"
        )
    out = np.full(x_matrix.shape[0], model.base_score)
    for tree in model.trees:
        out += model.config.learning_rate * _apply_tree(tree, x_matrix)
    return out


def predict_columns(model: GbdtModel, columns: dict[str, np.ndarray]) -> np.ndarray:
    unknown = set(columns) - set(model.feature_manifest)
    if unknown:
        raise SchemaError(f"unknown features: {sorted(unknown)}")
    missing = set(model.feature_manifest) - set(columns)
    if missing:
        raise SchemaError(f"features absent from input: {sorted(missing)}")
    return predict_matrix(model, np.column_stack([columns[n] for n in model.feature_manifest]))


def predict(model: GbdtModel, row: dict) -> float:
    """Predict one row given as a name -> value mapping (None = absent)."""
    unknown = set(row) - set(model.feature_manifest)
    if unknown:
        raise SchemaError(f"unknown features: {sorted(unknown)}")
    missing = set(model.feature_manifest) - set(row)
    if missing:
        raise SchemaError(f"features absent from row: {sorted(missing)}")
    vec = np.array(
        [np.nan if row[n] is None else float(row[n]) for n in model.feature_manifest]
    )
    return float(predict_matrix(model, vec[None, :])[0])


def feature_importance(model: GbdtModel) -> dict[str, float]:
    """Total split gain per feature, normalized to sum to 1."""
    total = sum(model.split_gains.values())
    if total <= 0:
        return {}
    return {name: gain / total for name, gain in sorted(model.split_gains.items())}


# ---------------------------------------------------------------------------
# TWINGBDT v1 serialization
# ---------------------------------------------------------------------------

def serialize_model(model: GbdtModel) -> str:
    cfg = model.config
    lines = [GBDT_MAGIC]
    for name in (
        "n_trees", "learning_rate", "max_leaves", "min_samples_leaf",
        "feature_fraction", "bagging_fraction", "n_bins", "seed",
    ):
        lines.append(f"config {name} {repr(getattr(cfg, name))}")
    lines.append(f"config loss {cfg.loss}")
    lines.append(f"manifest {','.join(model.feature_manifest)}")
    lines.append(f"base_score {repr(model.base_score)}")
    for name in sorted(model.split_gains):
        lines.append(f"gain {name} {repr(model.split_gains[name])}")
    lines.append(f"ntrees {len(model.trees)}")
    for i, tree in enumerate(model.trees):
        lines.append(f"tree {i} {tree.n_nodes}")
        for u in range(tree.n_nodes):
            lines.append(
                f"node {tree.feature[u]} {repr(float(tree.threshold[u]))} "
                f"{int(tree.miss_left[u])} {tree.left[u]} {tree.right[u]} "
                f"{repr(float(tree.value[u]))}"
            )
    return "\n".join(lines) + "\n"


def deserialize_model(text: str) -> GbdtModel:
    lines = text.splitlines()
    if not lines or lines[0] != GBDT_MAGIC:
        raise GbdtError(f"expected {GBDT_MAGIC!r} header")
    cfg_kwargs: dict = {}
    manifest: tuple[str, ...] = ()
    base_score = 0.0
    gains: dict[str, float] = {}
    trees: list[Tree] = []
    i = 1
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        tag, _, rest = line.partition(" ")
        if tag == "config":
            key, _, value = rest.partition(" ")
            if key == "loss":
                cfg_kwargs[key] = value
            elif key in ("learning_rate", "feature_fraction", "bagging_fraction"):
                cfg_kwargs[key] = float(value)
            else:
                cfg_kwargs[key] = int(value)
            i += 1
        elif tag == "manifest":
            manifest = tuple(rest.split(",")) if rest else ()
            i += 1
        elif tag == "base_score":
            base_score = float(rest)
            i += 1
        elif tag == "gain":
            name, _, value = rest.partition(" ")
            gains[name] = float(value)
            i += 1
        elif tag == "ntrees":
            i += 1
        elif tag == "tree":
            _, n_nodes = rest.split()
            n_nodes = int(n_nodes)
            feature = np.empty(n_nodes, dtype=np.int32)
            threshold = np.empty(n_nodes)
            miss_left = np.empty(n_nodes, dtype=bool)
            left = np.empty(n_nodes, dtype=np.int32)
            right = np.empty(n_nodes, dtype=np.int32)
            value = np.empty(n_nodes)
            for u in range(n_nodes):
                parts = lines[i + 1 + u].split()
                feature[u] = int(parts[1])
                threshold[u] = float(parts[2])
                miss_left[u] = parts[3] == "1"
                left[u] = int(parts[4])
                right[u] = int(parts[5])
                value[u] = float(parts[6])
            trees.append(Tree(feature, threshold, miss_left, left, right, value))
            i += 1 + n_nodes
        else:
            raise GbdtError(f"unexpected line in model container: {line!r}")
    return GbdtModel(
        config=GbdtConfig(**cfg_kwargs),
        feature_manifest=manifest,
        base_score=base_score,
        trees=trees,
        split_gains=gains,
    )


def write_model(model: GbdtModel, path) -> None:
    Path(path).write_text(serialize_model(model), encoding="utf-8")


def read_model(path) -> GbdtModel:
    return deserialize_model(Path(path).read_text(encoding="utf-8"))

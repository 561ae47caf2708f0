"""Multi-scale engineered features over aligned frames plus twin outputs.

All columns are causal: the value at minute t is a function of frame content
at minutes <= t (labels are declared non-features). Absent values are NaN
inside feature matrices — the boosted trees route missing values natively —
and every column belongs to exactly one named feature group.

The group manifest here is the normative local definition of the feature
inventory: cbt-derived columns in phys_cbt, posture/motion columns in the
behav_* groups (barometric pressure rides with behav_uwb as stall-level
positioning), environment in env_weather, daily yield in prod_milk, cyclic
time in global_time, and the twin's emissions in dt_features.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frameio import ContainerError, MAGIC, format_values, parse_values
from .synth import label_stress_windows
from .timeseries import AlignedFrame, Modality, Timestamp
from .twin import DT_FEATURE_COLUMNS, TwinRunResult

GROUP_NAMES = (
    "phys_cbt",
    "behav_ankle",
    "behav_immu",
    "behav_uwb",
    "env_weather",
    "prod_milk",
    "global_time",
    "dt_features",
)

DEFAULT_WINDOWS = (15, 60, 240)

# Fixed barn bounding box for the 4x4 UWB zone grid. Constants (not data
# bounds) keep the zone id causal.
BARN_X = (0.0, 50.0)
BARN_Y = (0.0, 30.0)
ZONE_SIDE = 4


class FeatureError(Exception):
    """Invalid feature request or malformed matrix."""


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    columns: tuple[str, ...]


@dataclass
class FeatureMatrix:
    """Per-cow engineered features, group manifest, and forecast labels."""

    cow: str
    timestamps: np.ndarray
    columns: dict[str, np.ndarray]
    groups: list[FeatureGroup]
    label_cbt_future: np.ndarray
    label_stress: np.ndarray

    def __post_init__(self):
        n = self.timestamps.size
        for name, col in self.columns.items():
            if col.size != n:
                raise FeatureError(f"column {name} length {col.size} != {n}")
        seen: dict[str, str] = {}
        for group in self.groups:
            for col in group.columns:
                if col in seen:
                    raise FeatureError(f"column {col} in both {seen[col]} and {group.name}")
                if col not in self.columns:
                    raise FeatureError(f"manifest column {col} missing from matrix")
                seen[col] = group.name
        orphans = set(self.columns) - set(seen)
        if orphans:
            raise FeatureError(f"columns outside any group: {sorted(orphans)}")

    @property
    def length(self) -> int:
        return int(self.timestamps.size)

    def group(self, name: str) -> FeatureGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def matrix(self, names) -> np.ndarray:
        return np.column_stack([self.columns[n] for n in names])


# ---------------------------------------------------------------------------
# Rolling statistics
# ---------------------------------------------------------------------------

ROLLING_STATS = ("mean", "std", "max", "min", "var", "skew")
_DISPERSION = {"std", "var", "skew"}


def _window_view(values: np.ndarray, window: int) -> np.ndarray:
    padded = np.concatenate([np.full(window - 1, np.nan), values])
    view = np.lib.stride_tricks.sliding_window_view(padded, window)
    return np.ascontiguousarray(view)


def rolling_stats(values: np.ndarray, windows, stats) -> dict[str, np.ndarray]:
    """Trailing-window statistics ending at t inclusive.

    Dispersion statistics need at least 2 present values in the window (3 for
    skewness, which is also undefined on zero variance); mean/max/min need 1.
    Var/std are the sample (n-1) forms; skew is the bias-adjusted sample
    formula g1 * sqrt(n(n-1)) / (n-2).
    """
    stats = tuple(stats)
    for s in stats:
        if s not in ROLLING_STATS:
            raise FeatureError(f"unknown rolling stat {s!r}")
    for w in windows:
        if w < 2 and _DISPERSION & set(stats):
            raise FeatureError("dispersion statistics need windows >= 2 minutes")
    values = np.asarray(values, dtype=float)
    out: dict[str, np.ndarray] = {}
    for window in windows:
        mat = _window_view(values, window)
        present = ~np.isnan(mat)
        count = present.sum(axis=1)
        need = {}
        if {"mean", "std", "var", "skew"} & set(stats):
            total = np.nansum(mat, axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                mean = total / count
            need["mean"] = np.where(count >= 1, mean, np.nan)
        if {"std", "var", "skew"} & set(stats):
            dev = mat - need["mean"][:, None]
            m2_sum = np.nansum(dev * dev, axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                var = m2_sum / (count - 1)
            need["var"] = np.where(count >= 2, var, np.nan)
            need["std"] = np.sqrt(need["var"])
            if "skew" in stats:
                m3_sum = np.nansum(dev * dev * dev, axis=1)
                with np.errstate(invalid="ignore", divide="ignore"):
                    m2 = m2_sum / count
                    m3 = m3_sum / count
                    # m2 * sqrt(m2) rather than m2**1.5: correctly rounded,
                    # so scalar recomputation reproduces it bit-exactly
                    g1 = m3 / (m2 * np.sqrt(m2))
                    adj = g1 * np.sqrt(count * (count - 1)) / (count - 2)
                need["skew"] = np.where((count >= 3) & (m2 > 0), adj, np.nan)
        if "max" in stats:
            filled = np.where(present, mat, -np.inf)
            need["max"] = np.where(count >= 1, filled.max(axis=1), np.nan)
        if "min" in stats:
            filled = np.where(present, mat, np.inf)
            need["min"] = np.where(count >= 1, filled.min(axis=1), np.nan)
        for s in stats:
            out[f"roll{window}_{s}"] = need[s]
    return out


def temporal_encoding(timestamps: np.ndarray) -> dict[str, np.ndarray]:
    """Cyclic hour embedding (continuous at midnight) and day of week."""
    minutes = np.asarray(timestamps, dtype=np.int64)
    hour = (minutes % 1440) / 60.0
    angle = 2 * np.pi * hour / 24.0
    return {
        "sin_hour": np.sin(angle),
        "cos_hour": np.cos(angle),
        "day_of_week": ((minutes // 1440 + 3) % 7).astype(float),
    }


def physiological_derivatives(cbt: np.ndarray, thi: np.ndarray) -> dict[str, np.ndarray]:
    """Per-minute CBT derivative and the CBT-vs-indoor-THI differential.

    The differential mixes degC with the unitless THI by definition and is
    carried as-is.
    """
    cbt = np.asarray(cbt, dtype=float)
    dcbt = np.full(cbt.size, np.nan)
    dcbt[1:] = cbt[1:] - cbt[:-1]
    return {"dcbt_dt": dcbt, "cbt_minus_thi": cbt - np.asarray(thi, dtype=float)}


def cumulative_stress(cbt: np.ndarray, tau: float) -> np.ndarray:
    """Running count of minutes with CBT strictly above tau; missing adds 0."""
    cbt = np.asarray(cbt, dtype=float)
    over = np.where(np.isnan(cbt), 0.0, (cbt > tau).astype(float))
    return np.cumsum(over)


def uwb_speed_and_zone(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    speed = np.full(x.size, np.nan)
    speed[1:] = np.hypot(x[1:] - x[:-1], y[1:] - y[:-1])
    absent = np.isnan(x) | np.isnan(y)
    fx = np.where(absent, 0.0, x)
    fy = np.where(absent, 0.0, y)
    gx = np.clip(((fx - BARN_X[0]) / (BARN_X[1] - BARN_X[0]) * ZONE_SIDE).astype(int), 0, ZONE_SIDE - 1)
    gy = np.clip(((fy - BARN_Y[0]) / (BARN_Y[1] - BARN_Y[0]) * ZONE_SIDE).astype(int), 0, ZONE_SIDE - 1)
    zone = np.where(absent, np.nan, (gx * ZONE_SIDE + gy).astype(float))
    return speed, zone


def cross_modal_features(
    thi_indoor: np.ndarray,
    thi_outdoor: np.ndarray,
    cbt: np.ndarray,
    activity: np.ndarray,
    speed: np.ndarray,
    zone: np.ndarray,
) -> dict[str, np.ndarray]:
    """Interaction columns coupling thermal state, behavior and environment."""
    return {
        "thi_gap_indoor_outdoor": thi_indoor - thi_outdoor,
        "cbt_x_activity": cbt * activity,
        "uwb_speed_x_zone": speed * zone,
        "activity_x_cbt_thi_gap": activity * (cbt - thi_indoor),
    }


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _nanchan(frame: AlignedFrame, modality: Modality, idx: int = 0) -> np.ndarray:
    return frame.channel(modality, idx).to_float_nan()


def _tslo(frame: AlignedFrame, modality: Modality) -> np.ndarray:
    return frame.time_since_obs[modality].astype(float)


def _immu_activity(frame: AlignedFrame) -> np.ndarray:
    axes = np.column_stack([np.abs(_nanchan(frame, Modality.IMMU, i)) for i in range(3)])
    count = (~np.isnan(axes)).sum(axis=1)
    with np.errstate(invalid="ignore"):
        mean = np.nansum(axes, axis=1) / count
    return np.where(count >= 1, mean, np.nan)


def assemble(
    frame: AlignedFrame,
    dt: TwinRunResult | None = None,
    horizon: int = 120,
    tau: float = 38.8,
    windows=DEFAULT_WINDOWS,
) -> FeatureMatrix:
    """Build the full feature matrix plus both forecast labels for one cow.

    dt may be a TwinRunResult; if omitted and the frame already carries the
    dt_features modality those channels are used; with neither, the
    dt_features group is absent (the without-twin ablation arm).
    """
    w_short, w_mid, w_long = windows
    cols: dict[str, np.ndarray] = {}
    groups: list[FeatureGroup] = []

    cbt = _nanchan(frame, Modality.CBT)
    thi = _nanchan(frame, Modality.THI)
    activity = _immu_activity(frame)

    # phys_cbt
    cols["cbt"] = cbt
    cols["cbt_tslo"] = _tslo(frame, Modality.CBT)
    short = rolling_stats(cbt, [w_short], ["mean", "std", "min", "max"])
    for s, arr in short.items():
        cols[f"cbt_{s}"] = arr
    for w in (w_mid, w_long):
        full = rolling_stats(cbt, [w], ["mean", "std", "min", "max", "var", "skew"])
        for s, arr in full.items():
            cols[f"cbt_{s}"] = arr
    cols.update(physiological_derivatives(cbt, thi))
    cols["cum_stress_minutes"] = cumulative_stress(cbt, tau)
    phys_names = ["cbt", "cbt_tslo"]
    phys_names += [f"cbt_roll{w_short}_{s}" for s in ("mean", "std", "max", "min")]
    for w in (w_mid, w_long):
        phys_names += [f"cbt_roll{w}_{s}" for s in ("mean", "std", "max", "min", "var", "skew")]
    phys_names += ["dcbt_dt", "cbt_minus_thi", "cbt_x_activity", "cum_stress_minutes"]

    # behav_ankle
    ankle = _nanchan(frame, Modality.ANKLE)
    cols["ankle_tilt"] = ankle
    cols["ankle_tslo"] = _tslo(frame, Modality.ANKLE)
    cols[f"ankle_roll{w_short}_mean"] = rolling_stats(ankle, [w_short], ["mean"])[f"roll{w_short}_mean"]
    mid = rolling_stats(ankle, [w_mid], ["mean", "std"])
    cols[f"ankle_roll{w_mid}_mean"] = mid[f"roll{w_mid}_mean"]
    cols[f"ankle_roll{w_mid}_std"] = mid[f"roll{w_mid}_std"]
    ankle_names = [
        "ankle_tilt",
        "ankle_tslo",
        f"ankle_roll{w_short}_mean",
        f"ankle_roll{w_mid}_mean",
        f"ankle_roll{w_mid}_std",
    ]

    # behav_immu
    immu_names = []
    for i, suffix in enumerate(("ax", "ay", "az", "gx", "gy", "gz")):
        cols[f"immu_{suffix}"] = _nanchan(frame, Modality.IMMU, i)
        immu_names.append(f"immu_{suffix}")
    cols["immu_activity"] = activity
    act_stats = rolling_stats(activity, [w_short, w_mid], ["mean", "std"])
    for s, arr in act_stats.items():
        cols[f"immu_activity_{s}"] = arr
    cols["immu_tslo"] = _tslo(frame, Modality.IMMU)
    immu_names += [
        "immu_activity",
        f"immu_activity_roll{w_short}_mean",
        f"immu_activity_roll{w_short}_std",
        f"immu_activity_roll{w_mid}_mean",
        f"immu_activity_roll{w_mid}_std",
        "immu_tslo",
        "activity_x_cbt_thi_gap",
    ]

    # behav_uwb (+ barometric pressure: stall-level positioning)
    uwb_x = _nanchan(frame, Modality.UWB, 0)
    uwb_y = _nanchan(frame, Modality.UWB, 1)
    cols["uwb_x"], cols["uwb_y"] = uwb_x, uwb_y
    cols["uwb_z"] = _nanchan(frame, Modality.UWB, 2)
    speed, zone = uwb_speed_and_zone(uwb_x, uwb_y)
    cols["uwb_speed"], cols["uwb_zone"] = speed, zone
    speed_stats = rolling_stats(speed, [w_short, w_mid], ["mean"])
    cols[f"uwb_speed_roll{w_short}_mean"] = speed_stats[f"roll{w_short}_mean"]
    cols[f"uwb_speed_roll{w_mid}_mean"] = speed_stats[f"roll{w_mid}_mean"]
    cols["uwb_tslo"] = _tslo(frame, Modality.UWB)
    cols["pressure_hpa"] = _nanchan(frame, Modality.PRESSURE)
    cols["pressure_tslo"] = _tslo(frame, Modality.PRESSURE)
    uwb_names = [
        "uwb_x", "uwb_y", "uwb_z", "uwb_speed", "uwb_zone",
        f"uwb_speed_roll{w_short}_mean", f"uwb_speed_roll{w_mid}_mean",
        "uwb_speed_x_zone", "uwb_tslo", "pressure_hpa", "pressure_tslo",
    ]

    # env_weather
    thi_outdoor = _nanchan(frame, Modality.WEATHER, 4)
    cols["thi_indoor"] = thi
    thi_stats = rolling_stats(thi, [w_mid, w_long], ["mean"])
    cols[f"thi_roll{w_mid}_mean"] = thi_stats[f"roll{w_mid}_mean"]
    cols[f"thi_roll{w_long}_mean"] = thi_stats[f"roll{w_long}_mean"]
    for i, suffix in enumerate(("temp", "humidity", "wind", "solar", "thi_outdoor")):
        cols[f"weather_{suffix}"] = _nanchan(frame, Modality.WEATHER, i)
    cols["thi_tslo"] = _tslo(frame, Modality.THI)
    cols["weather_tslo"] = _tslo(frame, Modality.WEATHER)
    env_names = [
        "thi_indoor", f"thi_roll{w_mid}_mean", f"thi_roll{w_long}_mean",
        "weather_temp", "weather_humidity", "weather_wind", "weather_solar",
        "weather_thi_outdoor", "thi_gap_indoor_outdoor", "thi_tslo", "weather_tslo",
    ]

    cols.update(cross_modal_features(thi, thi_outdoor, cbt, activity, speed, zone))

    # prod_milk
    cols["milk_kg"] = _nanchan(frame, Modality.MILK)
    cols["milk_tslo"] = _tslo(frame, Modality.MILK)

    # global_time
    cols.update(temporal_encoding(frame.timestamps()))

    groups.append(FeatureGroup("phys_cbt", tuple(phys_names)))
    groups.append(FeatureGroup("behav_ankle", tuple(ankle_names)))
    groups.append(FeatureGroup("behav_immu", tuple(immu_names)))
    groups.append(FeatureGroup("behav_uwb", tuple(uwb_names)))
    groups.append(FeatureGroup("env_weather", tuple(env_names)))
    groups.append(FeatureGroup("prod_milk", ("milk_kg", "milk_tslo")))
    groups.append(FeatureGroup("global_time", ("sin_hour", "cos_hour", "day_of_week")))

    dt_cols = None
    if dt is not None:
        dt_cols = dt.columns()
    elif frame.has(Modality.DT_FEATURES):
        dt_cols = {
            name: _nanchan(frame, Modality.DT_FEATURES, i)
            for i, name in enumerate(DT_FEATURE_COLUMNS)
        }
    if dt_cols is not None:
        for name in DT_FEATURE_COLUMNS:
            cols[name] = np.asarray(dt_cols[name], dtype=float)
        groups.append(FeatureGroup("dt_features", DT_FEATURE_COLUMNS))

    # labels: point value at t+horizon and window-max exceedance
    n = frame.length
    label_future = np.full(n, np.nan)
    if n > horizon:
        label_future[: n - horizon] = cbt[horizon:]
    cbt_ch = frame.channel(Modality.CBT)
    label_stress = label_stress_windows(cbt_ch.values, cbt_ch.mask, tau, horizon)

    return FeatureMatrix(
        cow=frame.cow,
        timestamps=frame.timestamps(),
        columns=cols,
        groups=groups,
        label_cbt_future=label_future,
        label_stress=label_stress,
    )


# ---------------------------------------------------------------------------
# Multi-cow pooling
# ---------------------------------------------------------------------------

@dataclass
class PooledMatrix:
    """Rows from several cows stacked for training, cow id carried per row."""

    cow_ids: np.ndarray
    timestamps: np.ndarray
    columns: dict[str, np.ndarray]
    groups: list[FeatureGroup]
    label_cbt_future: np.ndarray
    label_stress: np.ndarray

    @classmethod
    def from_matrices(cls, matrices: list[FeatureMatrix]) -> "PooledMatrix":
        if not matrices:
            raise FeatureError("nothing to pool")
        first = matrices[0]
        names = list(first.columns)
        for fm in matrices[1:]:
            if list(fm.columns) != names:
                raise FeatureError(f"column mismatch pooling cow {fm.cow}")
        return cls(
            cow_ids=np.concatenate([np.full(fm.length, fm.cow, dtype=object) for fm in matrices]),
            timestamps=np.concatenate([fm.timestamps for fm in matrices]),
            columns={n: np.concatenate([fm.columns[n] for fm in matrices]) for n in names},
            groups=list(first.groups),
            label_cbt_future=np.concatenate([fm.label_cbt_future for fm in matrices]),
            label_stress=np.concatenate([fm.label_stress for fm in matrices]),
        )

    @property
    def n_rows(self) -> int:
        return int(self.timestamps.size)

    def matrix(self, names) -> np.ndarray:
        return np.column_stack([self.columns[n] for n in names])

    def subset(self, row_mask: np.ndarray) -> "PooledMatrix":
        return PooledMatrix(
            cow_ids=self.cow_ids[row_mask],
            timestamps=self.timestamps[row_mask],
            columns={n: c[row_mask] for n, c in self.columns.items()},
            groups=list(self.groups),
            label_cbt_future=self.label_cbt_future[row_mask],
            label_stress=self.label_stress[row_mask],
        )

    def without_group(self, name: str) -> "PooledMatrix":
        dropped = None
        for g in self.groups:
            if g.name == name:
                dropped = g
        if dropped is None:
            return self
        keep_cols = {n: c for n, c in self.columns.items() if n not in dropped.columns}
        return PooledMatrix(
            cow_ids=self.cow_ids,
            timestamps=self.timestamps,
            columns=keep_cols,
            groups=[g for g in self.groups if g.name != name],
            label_cbt_future=self.label_cbt_future,
            label_stress=self.label_stress,
        )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def write_features(fm: FeatureMatrix, path) -> None:
    """Feature container: frame format family with a group-manifest header."""
    lines = [
        MAGIC,
        "kind features",
        f"cow {fm.cow}",
        f"start {int(fm.timestamps[0])}",
        f"step 1",
        f"length {fm.length}",
        f"ngroups {len(fm.groups)}",
    ]
    for g in fm.groups:
        lines.append(f"group {g.name} {','.join(g.columns)}")
    for g in fm.groups:
        for name in g.columns:
            col = fm.columns[name]
            lines.append(f"column {name}")
            lines.append(format_values(np.nan_to_num(col), ~np.isnan(col)))
    for name, col in (("label_cbt_future", fm.label_cbt_future), ("label_stress", fm.label_stress)):
        lines.append(f"label {name}")
        lines.append(format_values(np.nan_to_num(col), ~np.isnan(col)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_features(path) -> FeatureMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MAGIC:
        raise ContainerError(f"expected {MAGIC!r} header")
    header: dict[str, str] = {}
    groups: list[FeatureGroup] = []
    i = 1
    while i < len(lines) and not lines[i].startswith(("column ", "label ")):
        key, _, value = lines[i].partition(" ")
        if key == "group":
            gname, _, colspec = value.partition(" ")
            groups.append(FeatureGroup(gname, tuple(colspec.split(","))))
        else:
            header[key] = value
        i += 1
    if header.get("kind") != "features":
        raise ContainerError(f"not a features container: kind={header.get('kind')!r}")
    length = int(header["length"])
    start = int(header["start"])
    columns: dict[str, np.ndarray] = {}
    labels: dict[str, np.ndarray] = {}
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        tag, _, name = lines[i].partition(" ")
        values, mask = parse_values(lines[i + 1], length)
        arr = np.where(mask, values, np.nan)
        if tag == "column":
            columns[name] = arr
        else:
            labels[name] = arr
        i += 2
    return FeatureMatrix(
        cow=header["cow"],
        timestamps=start + np.arange(length, dtype=np.int64),
        columns=columns,
        groups=groups,
        label_cbt_future=labels["label_cbt_future"],
        label_stress=labels["label_stress"],
    )


def to_delimited(fm: FeatureMatrix) -> str:
    """Flat CSV export for inspection; absent values are empty fields."""
    names = [n for g in fm.groups for n in g.columns]
    header = "t_utc," + ",".join(names) + ",label_cbt_future,label_stress"
    rows = [header]
    for t in range(fm.length):
        cells = [Timestamp(int(fm.timestamps[t])).iso()]
        for n in names:
            v = fm.columns[n][t]
            cells.append("" if np.isnan(v) else repr(float(v)))
        for arr in (fm.label_cbt_future, fm.label_stress):
            v = arr[t]
            cells.append("" if np.isnan(v) else repr(float(v)))
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"

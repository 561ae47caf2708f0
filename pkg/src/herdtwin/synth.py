"""Synthetic multimodal herd generator with known ground truth.

The forward model reuses the twin's own thermal balance and behavioral Markov
machinery: a latent behavior path is sampled per cow, latent CBT is
integrated at 1-minute Euler steps, and observations are the latents plus
Gaussian noise, thinned by a two-state dropout process. Output is the exact
raw sensor-file format the ingestion pipeline reads, plus a ``truth/``
directory holding latent frames and the true per-cow parameters, so every
downstream claim can be checked against a known oracle.

Everything is deterministic given the seed; per-cow RNG streams are derived
from (seed, cow index) so parallel generation cannot change the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .frameio import write_frame
from .timeseries import AlignedFrame, Channel, Modality, Timestamp
from .twin import BehaviorModel, TwinParams, euler_step, write_params

MINUTES_PER_DAY = 1440


class SynthError(Exception):
    """Invalid generator configuration."""


@dataclass(frozen=True)
class HeatWave:
    start_day: float
    duration_days: float
    amplitude: float


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0
    mean_gap_minutes: float = 20.0

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0):
            raise SynthError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mean_gap_minutes < 1.0:
            raise SynthError("mean gap must be >= 1 minute")


#: Per-state emission means for [lying, standing, walking, feeding].
ANKLE_TILT_MEANS = np.array([75.0, 15.0, 20.0, 25.0])
ORIENTATION_MEANS = np.array([60.0, 20.0, 22.0, 30.0])
WALK_STEP_STD = np.array([0.02, 0.10, 0.80, 0.10])

DEFAULT_NOISE = {
    "cbt": 0.1,
    "immu": 0.15,
    "uwb": 0.3,
    "pressure": 0.5,
    "ankle": 2.0,
    "thi": 0.5,
    "weather": 1.0,
}

DEFAULT_DROPOUT = {
    "cbt": DropoutSpec(0.03, 20.0),
    "immu": DropoutSpec(0.05, 30.0),
    "uwb": DropoutSpec(0.05, 30.0),
    "pressure": DropoutSpec(0.05, 30.0),
    "ankle": DropoutSpec(0.05, 30.0),
    "thi": DropoutSpec(0.01, 10.0),
    "weather": DropoutSpec(0.01, 10.0),
}


@dataclass(frozen=True)
class DiurnalThi:
    base: float = 70.0
    amplitude: float = 7.0
    phase_hour: float = 8.0
    heat_waves: tuple[HeatWave, ...] = (
        HeatWave(start_day=4.0, duration_days=2.0, amplitude=8.0),
        HeatWave(start_day=10.0, duration_days=1.5, amplitude=10.0),
    )


@dataclass(frozen=True)
class SynthConfig:
    n_cows: int = 8
    days: int = 14
    seed: int = 42
    start: Timestamp = field(default_factory=lambda: Timestamp.from_iso("2024-06-01T00:00"))
    noise: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_NOISE))
    dropout: dict[str, DropoutSpec] = field(default_factory=lambda: dict(DEFAULT_DROPOUT))
    diurnal_thi: DiurnalThi = field(default_factory=DiurnalThi)
    param_spread: float = 1.0
    tz_offset_minutes: int = 0

    def __post_init__(self):
        if self.n_cows < 1:
            raise SynthError(f"n_cows must be >= 1, got {self.n_cows}")
        if self.days < 1:
            raise SynthError(f"days must be >= 1, got {self.days}")
        for name, std in self.noise.items():
            if std < 0:
                raise SynthError(f"noise std for {name} must be >= 0")

    @property
    def n_minutes(self) -> int:
        return self.days * MINUTES_PER_DAY

    def noiseless(self) -> "SynthConfig":
        return replace(
            self,
            noise={k: 0.0 for k in self.noise},
            dropout={k: DropoutSpec(0.0, 20.0) for k in self.dropout},
        )


@dataclass
class CowTruth:
    cow: str
    params: TwinParams
    latent_cbt: np.ndarray
    thi: np.ndarray
    behavior_state: np.ndarray
    activity: np.ndarray


@dataclass
class SynthResult:
    cfg: SynthConfig
    truths: list[CowTruth]
    raw_dir: Path | None = None
    truth_dir: Path | None = None


def _cow_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1000 + index])


def _station_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def _sample_true_params(rng: np.random.Generator, spread: float) -> TwinParams:
    base = TwinParams()

    def jitter(value, frac):
        return value * (1.0 + spread * frac * rng.uniform(-1.0, 1.0))

    return TwinParams(
        alpha_activity=jitter(base.alpha_activity, 0.25),
        beta_tolerance=jitter(base.beta_tolerance, 0.25),
        c_thermal=jitter(base.c_thermal, 0.15),
        k_d=jitter(base.k_d, 0.15),
        t_set=base.t_set + spread * 0.15 * rng.uniform(-1.0, 1.0),
        k_th=jitter(base.k_th, 0.15),
        m_basal=jitter(base.m_basal, 0.15),
        gamma=jitter(base.gamma, 0.20),
        teff_c0=base.teff_c0 + spread * 1.0 * rng.uniform(-1.0, 1.0),
        teff_c1=base.teff_c1 + spread * 0.015 * rng.uniform(-1.0, 1.0),
    )


def thi_profile(cfg: SynthConfig) -> np.ndarray:
    """Deterministic indoor THI: diurnal sinusoid plus heat-wave episodes."""
    minutes = np.arange(cfg.n_minutes)
    hours = (minutes % MINUTES_PER_DAY) / 60.0
    d = cfg.diurnal_thi
    thi = d.base + d.amplitude * np.sin(2 * np.pi * (hours - d.phase_hour) / 24.0)
    days = minutes / MINUTES_PER_DAY
    for wave in d.heat_waves:
        inside = (days >= wave.start_day) & (days < wave.start_day + wave.duration_days)
        phase = (days[inside] - wave.start_day) / wave.duration_days
        thi[inside] += wave.amplitude * np.sin(np.pi * phase) ** 2
    return thi


def _sample_behavior_path(rng, thi, start: Timestamp, bm: BehaviorModel) -> np.ndarray:
    n = thi.size
    states = np.zeros(n, dtype=np.int64)
    state = 0  # start lying
    draws = rng.random(n)
    for t in range(n):
        hour = int(((start.epoch_minutes + t) % MINUTES_PER_DAY) / 60)
        row = bm.modulated(hour, float(thi[t]))[state]
        state = int(np.searchsorted(np.cumsum(row), draws[t], side="right"))
        state = min(state, 3)
        states[t] = state
    return states


def _integrate_cbt(params: TwinParams, thi, activity) -> np.ndarray:
    n = thi.size
    out = np.zeros(n)
    num = (
        (params.m_basal + params.gamma * activity[0]) * params.alpha_activity
        + params.k_th * params.t_eff(thi[0])
        + params.k_d * params.beta_tolerance * params.t_set
    )
    t = num / (params.k_th + params.k_d * params.beta_tolerance)  # steady start
    for i in range(n):
        t = euler_step(t, float(activity[i]), float(thi[i]), params).t_core
        out[i] = t
    return out


def _dropout_mask(rng, n: int, spec: DropoutSpec) -> np.ndarray:
    """True where the observation survives. Two-state gap process."""
    if spec.rate == 0.0:
        rng.random(n)  # keep the stream aligned across configurations
        return np.ones(n, dtype=bool)
    p_end = 1.0 / spec.mean_gap_minutes
    p_start = spec.rate * p_end / (1.0 - spec.rate)
    draws = rng.random(n)
    keep = np.ones(n, dtype=bool)
    in_gap = False
    for t in range(n):
        if in_gap:
            keep[t] = False
            in_gap = draws[t] >= p_end
        else:
            if draws[t] < p_start:
                keep[t] = False
                in_gap = True
    return keep


def simulate_cow(cfg: SynthConfig, index: int, thi: np.ndarray, bm: BehaviorModel) -> CowTruth:
    rng = _cow_rng(cfg.seed, index)
    cow = f"cow{index + 1:02d}"
    params = _sample_true_params(rng, cfg.param_spread)
    states = _sample_behavior_path(rng, thi, cfg.start, bm)
    activity = bm.activity_means[states]
    latent = _integrate_cbt(params, thi, activity)
    return CowTruth(cow, params, latent, thi, states, activity)


def label_stress_windows(
    cbt_values: np.ndarray,
    cbt_mask: np.ndarray | None,
    theta_stress: float = 38.8,
    horizon: int = 120,
) -> np.ndarray:
    """Window-max exceedance labels: 1.0 iff max CBT over (t, t+horizon] > theta.

    Returns NaN where the horizon exits the frame or the window holds no
    observed value. Comparison is strict, matching the generator's bracket
    convention.
    """
    if horizon <= 0:
        raise SynthError(f"horizon must be positive, got {horizon}")
    values = np.asarray(cbt_values, dtype=float)
    n = values.size
    present = np.ones(n, dtype=bool) if cbt_mask is None else np.asarray(cbt_mask, dtype=bool)
    filled = np.where(present, values, -np.inf)
    labels = np.full(n, np.nan)
    if n <= horizon:
        return labels
    windows = np.lib.stride_tricks.sliding_window_view(filled[1:], horizon)
    window_max = windows.max(axis=1)
    observed = np.lib.stride_tricks.sliding_window_view(present[1:], horizon).any(axis=1)
    labels[: n - horizon][observed] = (window_max[observed] > theta_stress).astype(float)
    return labels


# ---------------------------------------------------------------------------
# Raw-file emission
# ---------------------------------------------------------------------------

def _local_time_string(epoch_minutes: int, tz_offset_minutes: int) -> str:
    from datetime import datetime, timezone

    dt = datetime.fromtimestamp(
        (epoch_minutes + tz_offset_minutes) * 60, tz=timezone.utc
    )
    return dt.strftime("%Y-%m-%dT%H:%M:%S")


def _write_csv(path: Path, header: str, rows: list[str]) -> None:
    path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")


def _cow_rows(cfg, cow, minutes, keep, columns) -> list[str]:
    tz = cfg.tz_offset_minutes
    rows = []
    for i, m in enumerate(minutes):
        if not keep[i]:
            continue
        vals = ",".join(repr(float(c[i])) for c in columns)
        rows.append(f"{cow},{_local_time_string(m, tz)},{tz},{vals}")
    return rows


def _station_rows(cfg, minutes, keep, columns) -> list[str]:
    tz = cfg.tz_offset_minutes
    rows = []
    for i, m in enumerate(minutes):
        if not keep[i]:
            continue
        vals = ",".join(repr(float(c[i])) for c in columns)
        rows.append(f"{_local_time_string(m, tz)},{tz},{vals}")
    return rows


def _weather_columns(cfg, thi, rng) -> list[np.ndarray]:
    n = thi.size
    hours = (np.arange(n) % MINUTES_PER_DAY) / 60.0
    temp = 0.6 * thi - 20.0 + rng.normal(0, cfg.noise["weather"], n)
    humidity = np.clip(
        55.0 + 15.0 * np.sin(2 * np.pi * (hours - 20.0) / 24.0) + rng.normal(0, 2 * cfg.noise["weather"], n),
        15.0,
        100.0,
    )
    wind = np.abs(rng.normal(2.0, 1.0, n))
    solar = np.clip(800.0 * np.sin(np.pi * (hours - 6.0) / 12.0), 0.0, None)
    solar = np.where((hours >= 6) & (hours <= 18), solar, 0.0) + np.abs(rng.normal(0, 5.0, n))
    thi_outdoor = thi - 1.5 + rng.normal(0, cfg.noise["weather"], n)
    return [temp, humidity, wind, solar, thi_outdoor]


def simulate_herd(cfg: SynthConfig, out_dir=None) -> SynthResult:
    """Generate the herd; optionally write raw files and the truth directory."""
    bm = BehaviorModel()
    thi = thi_profile(cfg)
    truths = [simulate_cow(cfg, i, thi, bm) for i in range(cfg.n_cows)]
    result = SynthResult(cfg=cfg, truths=truths)
    if out_dir is None:
        return result

    out_dir = Path(out_dir)
    raw = out_dir / "raw"
    truth = out_dir / "truth"
    raw.mkdir(parents=True, exist_ok=True)
    truth.mkdir(parents=True, exist_ok=True)
    n = cfg.n_minutes
    minutes = cfg.start.epoch_minutes + np.arange(n)

    station = _station_rng(cfg.seed)
    thi_obs = thi + station.normal(0, cfg.noise["thi"], n)
    keep_thi = _dropout_mask(station, n, cfg.dropout["thi"])
    _write_csv(raw / "thi.csv", "timestamp,tz_offset_min,v1", _station_rows(cfg, minutes, keep_thi, [thi_obs]))
    weather_cols = _weather_columns(cfg, thi, station)
    keep_weather = _dropout_mask(station, n, cfg.dropout["weather"])
    _write_csv(
        raw / "weather.csv",
        "timestamp,tz_offset_min,v1,v2,v3,v4,v5",
        _station_rows(cfg, minutes, keep_weather, weather_cols),
    )

    for i, ct in enumerate(truths):
        rng = np.random.default_rng([cfg.seed, 2000 + i])  # observation stream
        cow = ct.cow
        header_1 = "cow_id,timestamp,tz_offset_min,v1"

        cbt_obs = ct.latent_cbt + rng.normal(0, cfg.noise["cbt"], n)
        keep = _dropout_mask(rng, n, cfg.dropout["cbt"])
        _write_csv(raw / f"cbt_{cow}.csv", header_1, _cow_rows(cfg, cow, minutes, keep, [cbt_obs]))

        accel = [ct.activity + rng.normal(0, cfg.noise["immu"], n) for _ in range(3)]
        orient = [
            ORIENTATION_MEANS[ct.behavior_state] + rng.normal(0, 4 * cfg.noise["immu"], n)
            for _ in range(3)
        ]
        keep = _dropout_mask(rng, n, cfg.dropout["immu"])
        _write_csv(
            raw / f"immu_{cow}.csv",
            "cow_id,timestamp,tz_offset_min,v1,v2,v3,v4,v5,v6",
            _cow_rows(cfg, cow, minutes, keep, accel + orient),
        )

        steps = rng.normal(0, 1, (n, 2)) * WALK_STEP_STD[ct.behavior_state][:, None]
        pos = np.cumsum(steps, axis=0)
        pos[:, 0] = 5.0 + np.abs((pos[:, 0] + 20) % 80 - 40)  # reflect inside the barn
        pos[:, 1] = 3.0 + np.abs((pos[:, 1] + 12) % 48 - 24)
        z = 1.3 + rng.normal(0, 0.05, n)
        uwb_cols = [
            pos[:, 0] + rng.normal(0, cfg.noise["uwb"], n),
            pos[:, 1] + rng.normal(0, cfg.noise["uwb"], n),
            z,
        ]
        keep = _dropout_mask(rng, n, cfg.dropout["uwb"])
        _write_csv(
            raw / f"uwb_{cow}.csv",
            "cow_id,timestamp,tz_offset_min,v1,v2,v3",
            _cow_rows(cfg, cow, minutes, keep, uwb_cols),
        )

        pressure = 1013.0 + rng.normal(0, cfg.noise["pressure"], n)
        keep = _dropout_mask(rng, n, cfg.dropout["pressure"])
        _write_csv(raw / f"pressure_{cow}.csv", header_1, _cow_rows(cfg, cow, minutes, keep, [pressure]))

        ankle = ANKLE_TILT_MEANS[ct.behavior_state] + rng.normal(0, cfg.noise["ankle"], n)
        keep = _dropout_mask(rng, n, cfg.dropout["ankle"])
        _write_csv(raw / f"ankle_{cow}.csv", header_1, _cow_rows(cfg, cow, minutes, keep, [ankle]))

        milk_base = 24.0 + 10.0 * rng.random()
        milk_rows = []
        for day in range(cfg.days):
            m = cfg.start.epoch_minutes + day * MINUTES_PER_DAY
            yield_kg = milk_base + rng.normal(0, 1.0)
            milk_rows.append(
                f"{cow},{_local_time_string(m, cfg.tz_offset_minutes)},{cfg.tz_offset_minutes},{repr(float(yield_kg))}"
            )
        _write_csv(raw / f"milk_{cow}.csv", header_1, milk_rows)

        write_frame(truth_frame(ct, cfg.start), truth / f"{cow}.twinframe")
        write_params(ct.params, truth / f"{cow}.twinparams")
        behavior_lines = [
            f"{int(minutes[t])},{int(ct.behavior_state[t])},{repr(float(ct.activity[t]))}"
            for t in range(n)
        ]
        _write_csv(truth / f"behavior_{cow}.csv", "epoch_minute,state,activity", behavior_lines)

    result.raw_dir = raw
    result.truth_dir = truth
    return result


def truth_frame(ct: CowTruth, start: Timestamp) -> AlignedFrame:
    """Latent CBT and THI as a fully-present frame."""
    n = ct.latent_cbt.size
    mask = np.ones(n, dtype=bool)
    return AlignedFrame(
        cow=ct.cow,
        start=start,
        channels={
            Modality.CBT: (Channel(ct.latent_cbt, mask, "degC"),),
            Modality.THI: (Channel(ct.thi, mask, "index"),),
        },
    )

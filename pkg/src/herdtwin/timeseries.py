"""Timestamped, per-cow, multi-channel series and window arithmetic.

Everything downstream (ingestion, the twin, feature engineering, training)
operates on :class:`AlignedFrame` objects: immutable per-cow bundles of
1-minute-resolution channels with explicit missingness. Missing values are
represented as explicit absence (a presence mask), never as sentinel numbers,
so learners can distinguish "0.0" from "unknown".
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum

import numpy as np

logger = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440


class TimeSeriesError(Exception):
    """Base error for frame construction and window arithmetic."""


class BoundsError(TimeSeriesError):
    """A requested window falls outside the frame span."""


class IdentityError(TimeSeriesError):
    """Frames for different cows were combined."""


class ResolutionError(TimeSeriesError):
    """Frames with different step sizes were combined."""


class SpanError(TimeSeriesError):
    """Frame spans are neither overlapping nor adjacent."""


@dataclass(frozen=True, order=True)
class Timestamp:
    """Whole minutes since 1970-01-01T00:00 UTC.

    All arithmetic after alignment happens in whole minutes; display
    formatting and timezone handling are out of scope.
    """

    epoch_minutes: int

    @classmethod
    def from_iso(cls, text: str) -> "Timestamp":
        """Parse an ISO-8601 timestamp without zone, truncating to minutes."""
        dt = datetime.fromisoformat(text)
        if dt.tzinfo is not None:
            raise ValueError(f"expected zone-free timestamp, got {text!r}")
        dt = dt.replace(tzinfo=timezone.utc)
        return cls(int(dt.timestamp()) // 60)

    @classmethod
    def from_epoch_seconds(cls, seconds: int) -> "Timestamp":
        return cls(seconds // 60)

    def iso(self) -> str:
        dt = datetime.fromtimestamp(self.epoch_minutes * 60, tz=timezone.utc)
        return dt.strftime("%Y-%m-%dT%H:%M")

    def __add__(self, minutes: int) -> "Timestamp":
        return Timestamp(self.epoch_minutes + int(minutes))

    def __sub__(self, other):
        if isinstance(other, Timestamp):
            return self.epoch_minutes - other.epoch_minutes
        return Timestamp(self.epoch_minutes - int(other))

    @property
    def minute_of_day(self) -> int:
        return self.epoch_minutes % MINUTES_PER_DAY

    @property
    def hour_float(self) -> float:
        return self.minute_of_day / 60.0

    @property
    def day_index(self) -> int:
        return self.epoch_minutes // MINUTES_PER_DAY

    @property
    def day_of_week(self) -> int:
        """Monday = 0. The epoch day (1970-01-01) was a Thursday."""
        return (self.day_index + 3) % 7


# A cow identifier is an opaque, non-empty string, stable across modalities.
CowId = str


class Modality(Enum):
    """Closed enumeration of channel bundles with fixed channel counts."""

    UWB = ("uwb", 3)
    IMMU = ("immu", 6)
    PRESSURE = ("pressure", 1)
    CBT = ("cbt", 1)
    ANKLE = ("ankle", 1)
    THI = ("thi", 1)
    WEATHER = ("weather", 5)
    MILK = ("milk", 1)
    DT_FEATURES = ("dt_features", 8)
    GLOBAL_TIME = ("global_time", 3)

    def __init__(self, key: str, channel_count: int):
        self.key = key
        self.channel_count = channel_count

    @classmethod
    def from_key(cls, key: str) -> "Modality":
        for m in cls:
            if m.key == key:
                return m
        raise KeyError(f"unknown modality {key!r}")


#: Modalities produced by physical sensors (what raw files can contain).
SENSOR_MODALITIES = (
    Modality.UWB,
    Modality.IMMU,
    Modality.PRESSURE,
    Modality.CBT,
    Modality.ANKLE,
    Modality.THI,
    Modality.WEATHER,
    Modality.MILK,
)

#: Station-level modalities shared by the whole barn (no cow id in raw files).
STATION_MODALITIES = (Modality.THI, Modality.WEATHER)

DEFAULT_UNITS: dict[Modality, tuple[str, ...]] = {
    Modality.UWB: ("m", "m", "m"),
    Modality.IMMU: ("m/s2", "m/s2", "m/s2", "deg", "deg", "deg"),
    Modality.PRESSURE: ("hPa",),
    Modality.CBT: ("degC",),
    Modality.ANKLE: ("deg",),
    Modality.THI: ("index",),
    Modality.WEATHER: ("degC", "pct", "m/s", "W/m2", "index"),
    Modality.MILK: ("kg",),
    Modality.DT_FEATURES: ("degC", "degC", "prob", "prob", "prob", "prob", "prob", "degC"),
    Modality.GLOBAL_TIME: ("1", "1", "day"),
}


@dataclass(frozen=True)
class Channel:
    """One measured quantity on the 1-minute grid.

    ``values[t]`` is meaningful only where ``mask[t]`` is True. Absent slots
    are normalized to 0.0 so equal channels compare byte-equal; NaN is never
    stored.
    """

    values: np.ndarray
    mask: np.ndarray
    unit: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 1 or mask.ndim != 1:
            raise TimeSeriesError("channel values and mask must be 1-D")
        if values.size != mask.size:
            raise TimeSeriesError(
                f"values length {values.size} != mask length {mask.size}"
            )
        if mask.any() and not np.isfinite(values[mask]).all():
            raise TimeSeriesError("non-finite value stored at a present slot")
        values = values.copy()
        values[~mask] = 0.0
        values.setflags(write=False)
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_optional(cls, items, unit: str = "") -> "Channel":
        """Build from a sequence where None means absent."""
        values = np.array([0.0 if v is None else float(v) for v in items])
        mask = np.array([v is not None for v in items], dtype=bool)
        return cls(values, mask, unit)

    def __len__(self) -> int:
        return int(self.values.size)

    def value_at(self, t: int):
        return float(self.values[t]) if self.mask[t] else None

    def to_float_nan(self) -> np.ndarray:
        """Copy with absent slots as NaN (feature-engineering convention)."""
        out = self.values.copy()
        out[~self.mask] = np.nan
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Channel):
            return NotImplemented
        return (
            self.unit == other.unit
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.mask, other.mask)
        )


def _all_missing_channels(modality: Modality, length: int) -> tuple[Channel, ...]:
    units = DEFAULT_UNITS[modality]
    return tuple(
        Channel(np.zeros(length), np.zeros(length, dtype=bool), unit) for unit in units
    )


@dataclass(frozen=True)
class AlignedFrame:
    """Per-cow, 1-minute-resolution multimodal time series.

    ``missing_flags[m][t]`` is True iff every channel of modality ``m`` is
    absent at minute ``t``; ``time_since_obs[m][t]`` counts minutes since the
    last non-missing step (0 exactly where the flag is False, ``t + 1`` while
    nothing has been observed yet). Both are derived from the channels at
    construction time. Frames are immutable and safe to share across threads.
    """

    cow: CowId
    start: Timestamp
    channels: dict[Modality, tuple[Channel, ...]]
    step_minutes: int = 1
    missing_flags: dict[Modality, np.ndarray] = field(default=None, repr=False)
    time_since_obs: dict[Modality, np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.cow:
            raise IdentityError("cow id must be a non-empty string")
        if self.step_minutes < 1:
            raise ResolutionError(f"step_minutes must be >= 1, got {self.step_minutes}")
        if not self.channels:
            raise TimeSeriesError("frame needs at least one modality")
        channels = {}
        length = None
        for modality, chans in self.channels.items():
            chans = tuple(chans)
            if len(chans) != modality.channel_count:
                raise TimeSeriesError(
                    f"{modality.key} expects {modality.channel_count} channels, "
                    f"got {len(chans)}"
                )
            for ch in chans:
                if length is None:
                    length = len(ch)
                elif len(ch) != length:
                    raise TimeSeriesError(
                        f"channel length mismatch in {modality.key}: "
                        f"{len(ch)} != {length}"
                    )
            channels[modality] = chans
        missing = {}
        since = {}
        for modality, chans in channels.items():
            present = np.zeros(length, dtype=bool)
            for ch in chans:
                present |= ch.mask
            flags = ~present
            flags.setflags(write=False)
            missing[modality] = flags
            since[modality] = _time_since_observation(present)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "missing_flags", missing)
        object.__setattr__(self, "time_since_obs", since)

    @property
    def length(self) -> int:
        first = next(iter(self.channels.values()))
        return len(first[0])

    @property
    def end(self) -> Timestamp:
        return self.start + (self.length - 1) * self.step_minutes

    def timestamps(self) -> np.ndarray:
        """Epoch minutes of every step, as int64."""
        return self.start.epoch_minutes + self.step_minutes * np.arange(
            self.length, dtype=np.int64
        )

    def index_of(self, t: Timestamp) -> int:
        offset = t - self.start
        if offset % self.step_minutes != 0:
            raise BoundsError(f"{t.iso()} is off the {self.step_minutes}-min grid")
        idx = offset // self.step_minutes
        if idx < 0 or idx >= self.length:
            raise BoundsError(
                f"{t.iso()} outside frame span {self.start.iso()}..{self.end.iso()}"
            )
        return idx

    def has(self, modality: Modality) -> bool:
        return modality in self.channels

    def channel(self, modality: Modality, index: int = 0) -> Channel:
        return self.channels[modality][index]

    def __eq__(self, other) -> bool:
        if not isinstance(other, AlignedFrame):
            return NotImplemented
        if (
            self.cow != other.cow
            or self.start != other.start
            or self.step_minutes != other.step_minutes
            or set(self.channels) != set(other.channels)
        ):
            return False
        return all(self.channels[m] == other.channels[m] for m in self.channels)


def _time_since_observation(present: np.ndarray) -> np.ndarray:
    """Minutes since the last present step; t + 1 before any observation."""
    out = np.empty(present.size, dtype=np.int64)
    last = -1
    for t in range(present.size):
        if present[t]:
            last = t
        out[t] = t - last
    out.setflags(write=False)
    return out


def slice_window(frame: AlignedFrame, t_end: Timestamp, length: int) -> AlignedFrame:
    """Return the causal window of the last `length` steps ending at `t_end`.

    The result is a self-contained frame: missingness and time-since-
    observation are recomputed from the window's own content.
    """
    if length < 1:
        raise BoundsError(f"window length must be >= 1, got {length}")
    end_idx = frame.index_of(t_end)
    start_idx = end_idx - (length - 1)
    if start_idx < 0:
        t_first = t_end - (length - 1) * frame.step_minutes
        raise BoundsError(
            f"window start {t_first.iso()} precedes frame start {frame.start.iso()}"
        )
    sl = slice(start_idx, end_idx + 1)
    channels = {
        m: tuple(Channel(ch.values[sl], ch.mask[sl], ch.unit) for ch in chans)
        for m, chans in frame.channels.items()
    }
    return AlignedFrame(
        cow=frame.cow,
        start=frame.start + start_idx * frame.step_minutes,
        channels=channels,
        step_minutes=frame.step_minutes,
    )


def merge_frames(frames: list[AlignedFrame]) -> AlignedFrame:
    """Merge frames of one cow into a single frame over the union span.

    Modalities are unioned; where the same modality overlaps in time, the
    later-ingested frame wins (its absences overwrite too). Overwritten
    present cells are counted and logged as a warning. Spans must be
    overlapping or adjacent so the union is contiguous.
    """
    if not frames:
        raise TimeSeriesError("nothing to merge")
    cow = frames[0].cow
    step = frames[0].step_minutes
    for f in frames[1:]:
        if f.cow != cow:
            raise IdentityError(f"cannot merge cows {cow!r} and {f.cow!r}")
        if f.step_minutes != step:
            raise ResolutionError(
                f"cannot merge steps {step} min and {f.step_minutes} min"
            )
    by_start = sorted(frames, key=lambda f: f.start.epoch_minutes)
    covered_end = by_start[0].end
    for f in by_start[1:]:
        if f.start.epoch_minutes > covered_end.epoch_minutes + step:
            raise SpanError(
                f"gap between {covered_end.iso()} and {f.start.iso()}: spans must "
                "be overlapping or adjacent"
            )
        if f.end.epoch_minutes > covered_end.epoch_minutes:
            covered_end = f.end
    start = by_start[0].start
    length = (covered_end - start) // step + 1

    values: dict[Modality, list[np.ndarray]] = {}
    masks: dict[Modality, list[np.ndarray]] = {}
    units: dict[Modality, tuple[str, ...]] = {}
    overwrites = 0
    for f in frames:  # ingestion order, later frames win
        offset = (f.start - start) // step
        sl = slice(offset, offset + f.length)
        for modality, chans in f.channels.items():
            if modality not in values:
                values[modality] = [np.zeros(length) for _ in chans]
                masks[modality] = [np.zeros(length, dtype=bool) for _ in chans]
                units[modality] = tuple(ch.unit for ch in chans)
            for i, ch in enumerate(chans):
                overwrites += int(np.count_nonzero(masks[modality][i][sl]))
                values[modality][i][sl] = ch.values
                masks[modality][i][sl] = ch.mask
    if overwrites:
        logger.warning(
            "merge_frames: %d present cells overwritten (last write wins)", overwrites
        )
    channels = {
        m: tuple(
            Channel(values[m][i], masks[m][i], units[m][i])
            for i in range(len(values[m]))
        )
        for m in values
    }
    return AlignedFrame(cow=cow, start=start, channels=channels, step_minutes=step)

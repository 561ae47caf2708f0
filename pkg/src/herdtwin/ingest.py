"""Raw sensor-file ingestion: parse, normalize to UTC, resample, group.

The pipeline is strictly causal: a value emitted at minute t is a function of
raw records timestamped inside or before minute t only. Short gaps (strictly
shorter than ``max_gap_seconds``) are linearly interpolated at the raw
one-second rate before binning; interpolated samples are emitted only inside
the minute of the gap's closing record, so no minute ever depends on a record
from a later minute. Longer gaps stay absent — no forward filling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .timeseries import (
    STATION_MODALITIES,
    AlignedFrame,
    Channel,
    CowId,
    DEFAULT_UNITS,
    Modality,
    SENSOR_MODALITIES,
    Timestamp,
)

logger = logging.getLogger(__name__)

SECONDS_PER_MINUTE = 60
MINUTES_PER_DAY = 1440


class IngestError(Exception):
    """Base error for ingestion failures."""


class FormatError(IngestError):
    """A sensor file or timestamp does not conform to the documented format."""


class ConfigError(IngestError):
    """An ingest configuration value is out of range."""


@dataclass(frozen=True)
class RawRecord:
    """One line of a raw sensor file, before timestamp normalization.

    ``cow`` is None for station-level records (thi, weather). ``utc_seconds``
    is filled in by :func:`normalize_timestamps`.
    """

    modality: Modality
    local_time: str
    tz_offset_minutes: int
    values: tuple[float, ...]
    cow: CowId | None = None
    utc_seconds: int | None = None


@dataclass(frozen=True)
class IngestConfig:
    max_gap_seconds: int = 60
    step_minutes: int = 1
    aggregation: dict[Modality, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_gap_seconds <= 0:
            raise ConfigError(f"max_gap_seconds must be > 0, got {self.max_gap_seconds}")
        if self.step_minutes < 1:
            raise ConfigError(f"step_minutes must be >= 1, got {self.step_minutes}")
        for modality, agg in self.aggregation.items():
            if agg not in ("mean", "last", "max"):
                raise ConfigError(f"unknown aggregation {agg!r} for {modality.key}")

    def agg_for(self, modality: Modality) -> str:
        # mean matches resampling semantics for continuous channels; last
        # preserves discrete posture codes on the ankle tilt sensor.
        if modality in self.aggregation:
            return self.aggregation[modality]
        return "last" if modality is Modality.ANKLE else "mean"


@dataclass
class ParseResult:
    records: list[RawRecord]
    malformed_lines: list[int]
    total_lines: int

    @property
    def warning_count(self) -> int:
        return len(self.malformed_lines)


MALFORMED_TOLERANCE = 0.10


def parse_sensor_file(path, modality: Modality) -> ParseResult:
    """Parse one comma-separated sensor file.

    Header: ``cow_id,timestamp,tz_offset_min,v1[,v2,...]`` — station files
    (thi, weather) omit ``cow_id``. Malformed lines are counted and reported,
    not silently dropped; more than 10% malformed is a format error.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        return ParseResult([], [], 0)
    station = modality in STATION_MODALITIES
    want = modality.channel_count
    records: list[RawRecord] = []
    malformed: list[int] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            if station:
                cow = None
                ts, tz, vals = parts[0], parts[1], parts[2:]
            else:
                cow = parts[0]
                ts, tz, vals = parts[1], parts[2], parts[3:]
                if not cow:
                    raise ValueError("empty cow id")
            if len(vals) != want:
                raise ValueError(f"expected {want} values, got {len(vals)}")
            record = RawRecord(
                modality=modality,
                local_time=ts,
                tz_offset_minutes=int(tz),
                values=tuple(float(v) for v in vals),
                cow=cow,
            )
        except (ValueError, IndexError):
            malformed.append(lineno)
            continue
        records.append(record)
    total = len(records) + len(malformed)
    if total and len(malformed) / total > MALFORMED_TOLERANCE:
        shown = ", ".join(str(n) for n in malformed[:20])
        raise FormatError(
            f"{path}: {len(malformed)}/{total} malformed lines (>"
            f"{MALFORMED_TOLERANCE:.0%}); line numbers {shown}"
        )
    if malformed:
        logger.warning("%s: %d malformed lines skipped: %s", path, len(malformed), malformed[:20])
    return ParseResult(records, malformed, total)


def normalize_timestamps(records: list[RawRecord]) -> list[RawRecord]:
    """Convert each record's local clock reading to UTC epoch seconds.

    t_utc = local_time - tz_offset. Records keep their input order; within a
    (cow, modality) group UTC order may legitimately differ from file order
    when the offset changes mid-file.
    """
    out = []
    for rec in records:
        try:
            dt = datetime.fromisoformat(rec.local_time)
        except ValueError as exc:
            raise FormatError(f"unparseable timestamp {rec.local_time!r}") from exc
        if dt.tzinfo is not None:
            raise FormatError(f"timestamp {rec.local_time!r} must be zone-free")
        local_seconds = int(dt.replace(tzinfo=timezone.utc).timestamp())
        utc = local_seconds - rec.tz_offset_minutes * SECONDS_PER_MINUTE
        out.append(replace(rec, utc_seconds=utc))
    return out


@dataclass(frozen=True)
class ResampledChannel:
    """One channel on the minute grid, keyed by absolute epoch minute."""

    cow: CowId | None
    modality: Modality
    index: int
    start_minute: int
    values: np.ndarray
    mask: np.ndarray


def _interp_fill(times: np.ndarray, vals: np.ndarray, max_gap_seconds: int):
    """Add per-second linear fill inside short gaps.

    A fill sample at second s is kept only when s falls in the same minute as
    the gap's right endpoint; otherwise minute bins before that endpoint would
    depend on a future record.
    """
    if times.size < 2:
        return times, vals
    out_t = [times]
    out_v = [vals]
    gaps = np.diff(times)
    for i in np.nonzero((gaps > 1) & (gaps < max_gap_seconds))[0]:
        t0, t1 = int(times[i]), int(times[i + 1])
        v0, v1 = vals[i], vals[i + 1]
        first = max(t0 + 1, (t1 // SECONDS_PER_MINUTE) * SECONDS_PER_MINUTE)
        if first >= t1:
            continue
        fill_t = np.arange(first, t1)
        fill_v = v0 + (v1 - v0) * (fill_t - t0) / (t1 - t0)
        out_t.append(fill_t)
        out_v.append(fill_v)
    t = np.concatenate(out_t)
    v = np.concatenate(out_v)
    order = np.argsort(t, kind="stable")
    return t[order], v[order]


def resample_interpolate(
    records: list[RawRecord], cfg: IngestConfig | None = None
) -> list[ResampledChannel]:
    """Bin normalized records onto the minute grid, one output per channel.

    Multiple raw samples inside a bin are aggregated per ``cfg.aggregation``;
    minutes without any (raw or fill) sample stay absent. Gaps are data, not
    errors.
    """
    cfg = cfg or IngestConfig()
    groups: dict[tuple, list[RawRecord]] = {}
    for rec in records:
        if rec.utc_seconds is None:
            raise IngestError("records must pass normalize_timestamps first")
        groups.setdefault((rec.cow, rec.modality), []).append(rec)
    out: list[ResampledChannel] = []
    bin_seconds = cfg.step_minutes * SECONDS_PER_MINUTE
    for (cow, modality), recs in groups.items():
        order = np.argsort([r.utc_seconds for r in recs], kind="stable")
        times = np.array([recs[i].utc_seconds for i in order], dtype=np.int64)
        matrix = np.array([recs[i].values for i in order], dtype=np.float64)
        agg = cfg.agg_for(modality)
        for ch in range(modality.channel_count):
            t, v = _interp_fill(times, matrix[:, ch], cfg.max_gap_seconds)
            bins = t // bin_seconds
            uniq, starts = np.unique(bins, return_index=True)
            start_bin, end_bin = int(uniq[0]), int(uniq[-1])
            n = end_bin - start_bin + 1
            values = np.zeros(n)
            mask = np.zeros(n, dtype=bool)
            boundaries = np.append(starts, t.size)
            for k, b in enumerate(uniq):
                seg = v[boundaries[k]:boundaries[k + 1]]
                if agg == "mean":
                    val = float(np.mean(seg))
                elif agg == "max":
                    val = float(np.max(seg))
                else:  # last: latest time wins, ties resolved by file order
                    val = float(seg[-1])
                values[b - start_bin] = val
                mask[b - start_bin] = True
            out.append(
                ResampledChannel(
                    cow=cow,
                    modality=modality,
                    index=ch,
                    start_minute=start_bin * cfg.step_minutes,
                    values=values,
                    mask=mask,
                )
            )
    return out


def _place(dest_vals, dest_mask, start, src: ResampledChannel):
    offset = src.start_minute - start
    dest_vals[offset : offset + src.values.size] = src.values
    dest_mask[offset : offset + src.values.size] = src.mask


def _broadcast_milk_daily(values, mask, start_minute):
    """Broadcast each milk record forward to the end of its UTC day.

    Milk is a daily production figure; records stamped at day start therefore
    cover the whole day. Forward-only broadcast keeps ingestion causal when a
    record is stamped mid-day.
    """
    out_v = values.copy()
    out_m = mask.copy()
    n = values.size
    for t in np.nonzero(mask)[0]:
        day_end_abs = ((start_minute + t) // MINUTES_PER_DAY + 1) * MINUTES_PER_DAY
        stop = min(n, day_end_abs - start_minute)
        out_v[t:stop] = values[t]
        out_m[t:stop] = True
    return out_v, out_m


def group_and_frame(channels: list[ResampledChannel]) -> list[AlignedFrame]:
    """Assemble per-cow frames over the global span.

    Station-level modalities (thi, weather) broadcast to every cow; milk
    becomes a daily step function. A cow with no cbt channel still gets a
    frame — training later excludes label-less spans. Every sensor modality
    is materialized so missingness flags exist even for absent sensors.
    """
    if not channels:
        return []
    start = min(c.start_minute for c in channels)
    end = max(c.start_minute + c.values.size - 1 for c in channels)
    length = end - start + 1
    cows = sorted({c.cow for c in channels if c.cow is not None})
    if not cows:
        raise IngestError("no per-cow channels present")
    frames = []
    for cow in cows:
        mods: dict[Modality, tuple[Channel, ...]] = {}
        for modality in SENSOR_MODALITIES:
            units = DEFAULT_UNITS[modality]
            chans = []
            for idx in range(modality.channel_count):
                vals = np.zeros(length)
                mask = np.zeros(length, dtype=bool)
                station = modality in STATION_MODALITIES
                for src in channels:
                    if src.modality is modality and src.index == idx and (
                        src.cow == cow or (station and src.cow is None)
                    ):
                        _place(vals, mask, start, src)
                if modality is Modality.MILK:
                    vals, mask = _broadcast_milk_daily(vals, mask, start)
                chans.append(Channel(vals, mask, units[idx]))
            mods[modality] = tuple(chans)
        frames.append(
            AlignedFrame(cow=cow, start=Timestamp(start), channels=mods, step_minutes=1)
        )
    return frames


def ingest_directory(raw_dir, cfg: IngestConfig | None = None) -> list[AlignedFrame]:
    """Parse every raw file in a directory and build per-cow frames.

    File naming: ``<modality>_<anything>.csv`` for per-cow files,
    ``<modality>.csv`` for station files.
    """
    raw_dir = Path(raw_dir)
    records: list[RawRecord] = []
    files = sorted(raw_dir.glob("*.csv"))
    if not files:
        raise IngestError(f"no .csv sensor files in {raw_dir}")
    for path in files:
        stem = path.stem
        key = stem.split("_", 1)[0]
        try:
            modality = Modality.from_key(key)
        except KeyError as exc:
            raise FormatError(f"{path}: unknown modality prefix {key!r}") from exc
        result = parse_sensor_file(path, modality)
        records.extend(result.records)
    records = normalize_timestamps(records)
    channels = resample_interpolate(records, cfg)
    return group_and_frame(channels)

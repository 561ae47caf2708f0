"""TWINFRAME v1 container: exact-round-trip text serialization of frames.

Layout: a header block (one ``key value`` pair per line), a channel
directory, then one column-major value line per channel. Missing slots are
written as ``*``; present values use ``repr`` so floats round-trip
bit-exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .timeseries import AlignedFrame, Channel, Modality, Timestamp

MAGIC = "TWINFRAME v1"


class ContainerError(Exception):
    """Malformed or version-incompatible container file."""


def format_values(values: np.ndarray, mask: np.ndarray) -> str:
    return " ".join(
        repr(float(v)) if m else "*" for v, m in zip(values.tolist(), mask.tolist())
    )


def parse_values(line: str, expected: int):
    tokens = line.split()
    if len(tokens) != expected:
        raise ContainerError(f"expected {expected} values, got {len(tokens)}")
    values = np.zeros(expected)
    mask = np.zeros(expected, dtype=bool)
    for i, tok in enumerate(tokens):
        if tok != "*":
            values[i] = float(tok)
            mask[i] = True
    return values, mask


def write_frame(frame: AlignedFrame, path) -> None:
    lines = [
        MAGIC,
        "kind frame",
        f"cow {frame.cow}",
        f"start {frame.start.epoch_minutes}",
        f"step {frame.step_minutes}",
        f"length {frame.length}",
    ]
    n = sum(len(chans) for chans in frame.channels.values())
    lines.append(f"nchannels {n}")
    for modality in Modality:
        if modality not in frame.channels:
            continue
        for idx, ch in enumerate(frame.channels[modality]):
            if " " in ch.unit:
                raise ContainerError(f"unit {ch.unit!r} must not contain spaces")
            lines.append(f"channel {modality.key} {idx} {ch.unit or '-'}")
            lines.append(format_values(ch.values, ch.mask))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_frame(path) -> AlignedFrame:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        found = lines[0] if lines else "<empty>"
        raise ContainerError(f"expected {MAGIC!r}, found {found!r}")
    header = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("channel "):
        key, _, value = lines[i].partition(" ")
        header[key] = value
        i += 1
    if header.get("kind", "frame") != "frame":
        raise ContainerError(f"not a frame container: kind={header.get('kind')!r}")
    try:
        cow = header["cow"]
        start = Timestamp(int(header["start"]))
        step = int(header["step"])
        length = int(header["length"])
        nchannels = int(header["nchannels"])
    except KeyError as exc:
        raise ContainerError(f"missing header field {exc}") from exc
    channels: dict[Modality, list[Channel]] = {}
    seen = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        parts = lines[i].split()
        if parts[0] != "channel" or len(parts) != 4:
            raise ContainerError(f"bad channel directory line: {lines[i]!r}")
        modality = Modality.from_key(parts[1])
        idx = int(parts[2])
        unit = "" if parts[3] == "-" else parts[3]
        values, mask = parse_values(lines[i + 1], length)
        channels.setdefault(modality, []).append(None)
        if idx != len(channels[modality]) - 1:
            raise ContainerError(f"channel indices out of order for {modality.key}")
        channels[modality][idx] = Channel(values, mask, unit)
        seen += 1
        i += 2
    if seen != nchannels:
        raise ContainerError(f"header lists {nchannels} channels, found {seen}")
    return AlignedFrame(
        cow=cow,
        start=start,
        channels={m: tuple(chs) for m, chs in channels.items()},
        step_minutes=step,
    )

"""Tag file formats.

Binary layout (little-endian)::

    magic      8 bytes   b"QTAGS\\x00\\x00\\x01"
    site       1 byte    0 = Alice, 1 = Bob
    count      8 bytes   uint64 record count
    records    count * 9 bytes: int64 timestamp (ps), uint8 channel (0=H 1=V 2=D 3=A)

The CSV alternative has a ``timestamp_ps,channel`` header; channels may be
written as letters or codes.
"""
from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from ..calibrate import CHANNELS
from .stream import PS_PER_S, Site, TagStream

MAGIC = b"QTAGS\x00\x00\x01"
HEADER = struct.Struct("<8sBQ")
RECORD = np.dtype([("t", "<i8"), ("ch", "u1")])  # packed, itemsize 9


class TagFormatError(ValueError):
    """Malformed tag file: bad magic, bad site code, or truncated records."""


def _infer_span(times: np.ndarray) -> float:
    if times.size < 2:
        return 1.0
    return max(float(times[-1] - times[0]) / PS_PER_S, 1.0 / PS_PER_S)


def encode(stream: TagStream) -> bytes:
    records = np.empty(len(stream), dtype=RECORD)
    records["t"] = stream.times
    records["ch"] = stream.channels
    return HEADER.pack(MAGIC, int(stream.site), len(stream)) + records.tobytes()


def decode(data: bytes, span: float | None = None) -> TagStream:
    """Parse a binary tag file; ``span`` defaults to the timestamp range."""
    if len(data) < HEADER.size:
        raise TagFormatError("file shorter than header")
    magic, site, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TagFormatError(f"bad magic {magic!r}")
    if site not in (0, 1):
        raise TagFormatError(f"bad site code {site}")
    body = memoryview(data)[HEADER.size :]
    if len(body) != count * RECORD.itemsize:
        raise TagFormatError(
            f"expected {count} records ({count * RECORD.itemsize} bytes), found {len(body)} bytes"
        )
    records = np.frombuffer(body, dtype=RECORD, count=count)
    times = records["t"].astype(np.int64)
    channels = records["ch"].astype(np.uint8)
    if channels.size and channels.max() >= len(CHANNELS):
        raise TagFormatError("channel code out of range")
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise TagFormatError("timestamps not sorted")
    return TagStream(times, channels, Site(site), span if span is not None else _infer_span(times))


def write_tags(path, stream: TagStream) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        path.write_text(to_csv(stream))
    else:
        path.write_bytes(encode(stream))


def read_tags(path, span: float | None = None, site: Site | None = None) -> TagStream:
    """Read a binary or CSV tag file. CSV files carry no site; pass ``site``."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return from_csv(path.read_text(), site if site is not None else Site.ALICE, span)
    return decode(path.read_bytes(), span)


def to_csv(stream: TagStream) -> str:
    buf = io.StringIO()
    buf.write("timestamp_ps,channel\n")
    letters = np.array(CHANNELS)[stream.channels]
    for t, ch in zip(stream.times.tolist(), letters.tolist()):
        buf.write(f"{t},{ch}\n")
    return buf.getvalue()


def from_csv(text: str, site: Site, span: float | None = None) -> TagStream:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["timestamp_ps", "channel"]:
        raise TagFormatError("CSV header must be 'timestamp_ps,channel'")
    times, channels = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise TagFormatError(f"line {lineno}: expected 2 fields")
        t, ch = row[0].strip(), row[1].strip()
        try:
            times.append(int(t))
            channels.append(CHANNELS.index(ch.upper()) if ch.upper() in CHANNELS else int(ch))
        except ValueError as exc:
            raise TagFormatError(f"line {lineno}: {exc}") from None
    times = np.array(times, dtype=np.int64)
    channels = np.array(channels, dtype=np.int64)
    if channels.size and (channels.min() < 0 or channels.max() >= len(CHANNELS)):
        raise TagFormatError("channel code out of range")
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise TagFormatError("timestamps not sorted")
    return TagStream(times, channels.astype(np.uint8), site, span if span is not None else _infer_span(times))

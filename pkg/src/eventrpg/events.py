"""Event-stream data model, CSV/BIN (de)serialization and frame binning.

An event is a 4-tuple ``(x, y, t, p)``: pixel column, pixel row, timestamp in
microseconds and polarity (0 = OFF, 1 = ON).  Streams are stored column-wise
as numpy arrays, sorted by timestamp.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional

import numpy as np

__all__ = [
    "Event",
    "EventStream",
    "FrameTensor",
    "EventFormatError",
    "EventBoundsError",
    "PolarityError",
    "parse_events",
    "write_events",
    "to_frames",
    "frame_coordinates",
    "read_events_file",
    "write_events_file",
]

CSV_HEADER = "x,y,t,p"
BIN_MAGIC = b"EVT1"
_BIN_HEADER = struct.Struct("<4sIIQ")
_BIN_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("p", "u1")])


class EventFormatError(ValueError):
    """Malformed CSV line or BIN record.  ``line`` is 1-based (record index for BIN)."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EventBoundsError(ValueError):
    """Event coordinate outside the declared sensor geometry."""


class PolarityError(ValueError):
    """Polarity outside {0, 1}."""


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


def _as_int_array(values, dtype=np.int64) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events bound to a ``width`` x ``height`` sensor.

    ``duration`` is optional; when unset, frame binning uses the stream's own
    ``[min t, max t]`` range.  Construction validates bounds and polarity and
    stable-sorts by timestamp, so equal-timestamp events keep their order.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    duration: Optional[int] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        p = np.asarray(self.p, dtype=np.int64).reshape(-1)
        if not (len(x) == len(y) == len(t) == len(p)):
            raise ValueError("x, y, t, p must have equal length")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid geometry {self.width}x{self.height}")
        if len(x):
            bad = np.flatnonzero((p != 0) & (p != 1))
            if bad.size:
                raise PolarityError(f"polarity {p[bad[0]]} at event {bad[0]} not in {{0, 1}}")
            for name, arr, limit in (("x", x, self.width), ("y", y, self.height)):
                bad = np.flatnonzero((arr < 0) | (arr >= limit))
                if bad.size:
                    raise EventBoundsError(
                        f"{name}={arr[bad[0]]} at event {bad[0]} outside [0, {limit})"
                    )
            if np.any(t < 0):
                raise ValueError("timestamps must be nonnegative")
            if self.duration is not None and t.max() >= self.duration:
                raise EventBoundsError(f"t={t.max()} not below duration {self.duration}")
            if np.any(np.diff(t) < 0):
                order = np.argsort(t, kind="stable")
                x, y, t, p = x[order], y[order], t[order], p[order]
        object.__setattr__(self, "x", _as_int_array(x))
        object.__setattr__(self, "y", _as_int_array(y))
        object.__setattr__(self, "t", _as_int_array(t))
        object.__setattr__(self, "p", _as_int_array(p, np.uint8))

    @classmethod
    def empty(cls, width: int, height: int, duration: Optional[int] = None) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height, duration)

    @classmethod
    def from_events(cls, events, width: int, height: int, duration=None) -> "EventStream":
        events = list(events)
        if not events:
            return cls.empty(width, height, duration)
        x, y, t, p = zip(*events)
        return cls(x, y, t, p, width, height, duration)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield Event(x, y, t, p)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.duration == other.duration
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )

    __hash__ = None

    def select(self, mask: np.ndarray) -> "EventStream":
        """Subset of events (keeps geometry and order)."""
        return EventStream(
            self.x[mask], self.y[mask], self.t[mask], self.p[mask],
            self.width, self.height, self.duration,
        )

    def with_coordinates(self, x: np.ndarray, y: np.ndarray) -> "EventStream":
        """Replace coordinates, discarding events that fall outside the canvas."""
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        keep = (x >= 0) & (x < self.width) & (y >= 0) & (y < self.height)
        return EventStream(
            x[keep], y[keep], self.t[keep], self.p[keep],
            self.width, self.height, self.duration,
        )


@dataclass(frozen=True)
class FrameTensor:
    """Spike-count frames of shape ``(T, C, H, W)``; channel 0 = OFF, 1 = ON."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4:
            raise ValueError(f"frames must be 4-D (T, C, H, W), got shape {data.shape}")
        if np.any(data < 0):
            raise ValueError("frame entries must be nonnegative")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self) -> int:
        return self.data.shape[0]


# ---------------------------------------------------------------------------
# parsing / writing
# ---------------------------------------------------------------------------


def _parse_csv(raw: bytes, width: Optional[int], height: Optional[int]) -> EventStream:
    text = raw.decode("ascii") if isinstance(raw, (bytes, bytearray)) else raw
    rows = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.strip("\r")
        if not line.strip():
            continue
        if lineno == 1 and line.replace(" ", "") == CSV_HEADER:
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise EventFormatError(f"expected 4 fields, got {len(parts)}: {line!r}", lineno)
        try:
            vals = [int(s) for s in parts]
        except ValueError:
            raise EventFormatError(f"non-integer field in {line!r}", lineno) from None
        if min(vals) < 0:
            raise EventFormatError(f"negative field in {line!r}", lineno)
        if vals[3] not in (0, 1):
            raise PolarityError(f"line {lineno}: polarity {vals[3]} not in {{0, 1}}")
        if width is not None and vals[0] >= width:
            raise EventBoundsError(f"line {lineno}: x={vals[0]} outside width {width}")
        if height is not None and vals[1] >= height:
            raise EventBoundsError(f"line {lineno}: y={vals[1]} outside height {height}")
        rows.append(vals)
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    if width is None:
        width = int(arr[:, 0].max()) + 1 if len(arr) else 1
    if height is None:
        height = int(arr[:, 1].max()) + 1 if len(arr) else 1
    return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height)


def _parse_bin(raw: bytes) -> EventStream:
    if len(raw) < _BIN_HEADER.size:
        raise EventFormatError("truncated header")
    magic, width, height, count = _BIN_HEADER.unpack_from(raw, 0)
    if magic != BIN_MAGIC:
        raise EventFormatError(f"bad magic {magic!r}")
    body = memoryview(raw)[_BIN_HEADER.size:]
    expected = count * _BIN_RECORD.itemsize
    if len(body) != expected:
        complete = len(body) // _BIN_RECORD.itemsize
        raise EventFormatError(
            f"body is {len(body)} bytes, header declares {count} records ({expected} bytes)",
            complete + 1,
        )
    rec = np.frombuffer(body, dtype=_BIN_RECORD, count=count)
    bad = np.flatnonzero(rec["p"] > 1)
    if bad.size:
        raise PolarityError(f"record {bad[0] + 1}: polarity {rec['p'][bad[0]]} not in {{0, 1}}")
    for name, limit in (("x", width), ("y", height)):
        bad = np.flatnonzero(rec[name] >= limit)
        if bad.size:
            raise EventBoundsError(f"record {bad[0] + 1}: {name}={rec[name][bad[0]]} outside {limit}")
    return EventStream(
        rec["x"].astype(np.int64), rec["y"].astype(np.int64),
        rec["t"].astype(np.int64), rec["p"], width, height,
    )


def parse_events(raw: bytes, format: str = "csv", width: Optional[int] = None,
                 height: Optional[int] = None) -> EventStream:
    """Parse a CSV or BIN event payload.

    Args:
        raw: file contents.
        format: ``"csv"`` or ``"bin"``.
        width, height: sensor geometry.  Required to bounds-check CSV input
            (CSV carries no geometry; when omitted it is inferred as max + 1).
            Ignored for BIN, whose header carries the geometry.

    Raises:
        EventFormatError: malformed line/record (message carries the line number).
        PolarityError: polarity outside {0, 1}.
        EventBoundsError: coordinate outside the declared geometry.
    """
    if format == "csv":
        return _parse_csv(raw, width, height)
    if format == "bin":
        return _parse_bin(bytes(raw))
    raise ValueError(f"unknown event format {format!r}")


def write_events(stream: EventStream, format: str = "csv") -> bytes:
    """Serialize a stream; ``duration`` is not part of either format."""
    if format == "csv":
        lines = [CSV_HEADER]
        lines.extend(
            f"{x},{y},{t},{p}"
            for x, y, t, p in zip(stream.x.tolist(), stream.y.tolist(),
                                  stream.t.tolist(), stream.p.tolist())
        )
        return ("\n".join(lines) + "\n").encode("ascii")
    if format == "bin":
        if stream.width > 0xFFFF or stream.height > 0xFFFF:
            raise ValueError("BIN format stores coordinates as u16")
        rec = np.empty(len(stream), dtype=_BIN_RECORD)
        rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
        header = _BIN_HEADER.pack(BIN_MAGIC, stream.width, stream.height, len(stream))
        return header + rec.tobytes()
    raise ValueError(f"unknown event format {format!r}")


def _format_from_path(path) -> str:
    return "bin" if str(path).lower().endswith((".bin", ".evt")) else "csv"


def read_events_file(path, width=None, height=None) -> EventStream:
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_events(raw, _format_from_path(path), width, height)


def write_events_file(stream: EventStream, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_events(stream, _format_from_path(path)))


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def frame_coordinates(stream: EventStream, H: int, W: int):
    """Map event pixels onto an ``H`` x ``W`` grid.

    Identity when the geometry already matches.  Otherwise the shorter
    sensor side is padded symmetrically to a square and coordinates are
    scaled by integer nearest mapping.
    """
    if (stream.height, stream.width) == (H, W):
        return stream.x, stream.y
    side = max(stream.width, stream.height)
    ox = (side - stream.width) // 2
    oy = (side - stream.height) // 2
    xs = (stream.x + ox) * W // side
    ys = (stream.y + oy) * H // side
    return xs, ys


def time_bins(stream: EventStream, T: int) -> np.ndarray:
    """Equal-width time bin per event; the final bin is right-closed."""
    if len(stream) == 0:
        return np.zeros(0, dtype=np.int64)
    if stream.duration is not None:
        start, span = 0, stream.duration
    else:
        start = int(stream.t[0])
        span = int(stream.t[-1]) - start
    if span <= 0:
        return np.zeros(len(stream), dtype=np.int64)
    bins = (stream.t - start) * T // span
    return np.minimum(bins, T - 1)


def to_frames(stream: EventStream, T: int, H: Optional[int] = None, W: Optional[int] = None,
              binarize: bool = False) -> FrameTensor:
    """Bin events into a ``(T, 2, H, W)`` count tensor.

    Each event adds 1 to ``data[bin, p, y, x]``.  With ``binarize`` the counts
    are clipped to {0, 1} afterwards.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    H = stream.height if H is None else H
    W = stream.width if W is None else W
    data = np.zeros((T, 2, H, W), dtype=np.float64)
    if len(stream):
        xs, ys = frame_coordinates(stream, H, W)
        np.add.at(data, (time_bins(stream, T), stream.p.astype(np.int64), ys, xs), 1.0)
    if binarize:
        np.minimum(data, 1.0, out=data)
    return FrameTensor(data)

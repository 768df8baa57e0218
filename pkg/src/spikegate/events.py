"""
Event-camera streams: parsing, serialization, synthesis and frame binning.

Two on-disk formats are supported.

``SPK1`` binary (little-endian)::

    53 50 4B 31          magic "SPK1"
    u16 width, u16 height, u32 event count
    repeated: u32 t_us, u16 x, u16 y, u8 polarity     (9 bytes, packed)

CSV fallback: header ``t,x,y,p`` followed by one decimal event per line. An
optional leading ``# width=W height=H`` comment declares the sensor geometry;
without it the geometry is taken from the caller or inferred from the data.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"SPK1"
HEADER = struct.Struct("<4sHHI")
RECORD_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
CSV_HEADER = "t,x,y,p"

OFF, ON = 0, 1


class Event(NamedTuple):
    t: int
    x: int
    y: int
    polarity: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-sorted polarity events for a ``width`` x ``height`` sensor.

    Stored column-wise as numpy arrays; ``events`` yields :class:`Event` tuples.
    """

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValidationError("event columns have different lengths")
        if self.width < 0 or self.height < 0:
            raise ValidationError(f"negative geometry {self.width}x{self.height}")
        for name in ("t", "x", "y", "p"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        _check_records(self.t, self.x, self.y, self.p, self.width, self.height)
        if n > 1 and np.any(np.diff(self.t) < 0):
            raise ValidationError("events are not sorted by timestamp")

    @classmethod
    def from_events(cls, width: int, height: int, events: Sequence[Tuple[int, int, int, int]],
                    sort: bool = True) -> "EventStream":
        arr = np.asarray(list(events), dtype=np.int64).reshape(-1, 4)
        t, x, y, p = arr.T
        if sort:
            order = np.argsort(t, kind="stable")
            t, x, y, p = t[order], x[order], y[order], p[order]
        return cls(width, height, t, x, y, p)

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(width, height, z, z, z, z)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def events(self) -> Iterator[Event]:
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(*row)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in "txyp"
        )

    def merge(self, other: "EventStream") -> "EventStream":
        """Stable merge of two streams on the same sensor (``self`` wins ties)."""
        if (self.width, self.height) != (other.width, other.height):
            raise ValidationError("cannot merge streams with different geometry")
        cols = [np.concatenate([getattr(self, k), getattr(other, k)]) for k in "txyp"]
        order = np.argsort(cols[0], kind="stable")
        return EventStream(self.width, self.height, *(c[order] for c in cols))

    def shifted(self, dt: int) -> "EventStream":
        t = self.t + int(dt)
        if len(t) and t.min() < 0:
            raise ValidationError("shift would produce negative timestamps")
        return EventStream(self.width, self.height, t, self.x, self.y, self.p)


def _check_records(t, x, y, p, width, height, offset=0):
    bad = np.flatnonzero((t < 0) | (x < 0) | (x >= width) | (y < 0) | (y >= height))
    if len(bad):
        i = int(bad[0])
        raise ValidationError(
            f"record {i + offset}: event (t={t[i]}, x={x[i]}, y={y[i]}) outside "
            f"{width}x{height} sensor"
        )
    bad = np.flatnonzero((p != OFF) & (p != ON))
    if len(bad):
        i = int(bad[0])
        raise ValidationError(f"record {i + offset}: polarity {p[i]} not in {{0, 1}}")


# --------------------------------------------------------------------------- #
# Serialization
# --------------------------------------------------------------------------- #


def serialize_binary(stream: EventStream) -> bytes:
    rec = np.empty(len(stream), dtype=RECORD_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    return HEADER.pack(MAGIC, stream.width, stream.height, len(stream)) + rec.tobytes()


def serialize_csv(stream: EventStream) -> bytes:
    lines = [f"# width={stream.width} height={stream.height}", CSV_HEADER]
    lines += [f"{e.t},{e.x},{e.y},{e.polarity}" for e in stream.events]
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_event_file(raw: bytes, width: Optional[int] = None,
                     height: Optional[int] = None) -> EventStream:
    """Decode ``SPK1`` binary or ``t,x,y,p`` CSV bytes into a validated stream.

    Binary streams must already be time-sorted; CSV rows are stably sorted.
    ``width``/``height`` supply the geometry for CSV input that lacks a
    ``# width=.. height=..`` line.
    """
    if raw[:4] == MAGIC:
        return _parse_binary(raw)
    return _parse_csv(raw, width, height)


def _parse_binary(raw: bytes) -> EventStream:
    if len(raw) < HEADER.size:
        raise FormatError("truncated SPK1 header")
    _, width, height, count = HEADER.unpack_from(raw)
    body = raw[HEADER.size:]
    if len(body) != count * RECORD_DTYPE.itemsize:
        raise FormatError(
            f"SPK1 body holds {len(body)} bytes, expected {count} records "
            f"of {RECORD_DTYPE.itemsize} bytes"
        )
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    t, x, y, p = (rec[k].astype(np.int64) for k in "txyp")
    _check_records(t, x, y, p, width, height)
    dec = np.flatnonzero(np.diff(t) < 0)
    if len(dec):
        raise ValidationError(f"record {int(dec[0]) + 1}: timestamp decreases in binary stream")
    return EventStream(width, height, t, x, y, p)


def _parse_csv(raw: bytes, width: Optional[int], height: Optional[int]) -> EventStream:
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("input is neither SPK1 binary nor ASCII CSV") from exc
    lines = [ln.strip() for ln in io.StringIO(text)]
    lines = [ln for ln in lines if ln]
    while lines and lines[0].startswith("#"):
        width, height = _parse_geometry_comment(lines.pop(0), width, height)
    if not lines or lines[0].replace(" ", "") != CSV_HEADER:
        raise FormatError(f"missing magic 'SPK1' or CSV header '{CSV_HEADER}'")
    rows = []
    for i, ln in enumerate(lines[1:]):
        parts = ln.split(",")
        try:
            if len(parts) != 4:
                raise ValueError
            rows.append([int(v) for v in parts])
        except ValueError:
            raise FormatError(f"record {i}: malformed CSV row {ln!r}") from None
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    if width is None or height is None:
        width = int(arr[:, 1].max()) + 1 if len(arr) else 0
        height = int(arr[:, 2].max()) + 1 if len(arr) else 0
    t, x, y, p = arr.T
    _check_records(t, x, y, p, width, height)
    order = np.argsort(t, kind="stable")
    return EventStream(width, height, t[order], x[order], y[order], p[order])


def _parse_geometry_comment(line, width, height):
    fields = dict(tok.split("=", 1) for tok in line.lstrip("#").split() if "=" in tok)
    try:
        if "width" in fields:
            width = int(fields["width"])
        if "height" in fields:
            height = int(fields["height"])
    except ValueError:
        raise FormatError(f"bad geometry comment {line!r}") from None
    return width, height


def read_event_file(path, width=None, height=None) -> EventStream:
    with open(path, "rb") as fh:
        return parse_event_file(fh.read(), width, height)


def write_event_file(path, stream: EventStream) -> None:
    data = serialize_csv(stream) if str(path).endswith(".csv") else serialize_binary(stream)
    with open(path, "wb") as fh:
        fh.write(data)


# --------------------------------------------------------------------------- #
# Synthesis
# --------------------------------------------------------------------------- #


def _check_geometry(geometry):
    width, height = geometry
    if width <= 0 or height <= 0:
        raise ValidationError(f"zero-area geometry {width}x{height}")
    return int(width), int(height)


def synth_noise(geometry, rate: float, duration: float, seed: int) -> EventStream:
    """Uniform Poisson background: ``rate`` events per pixel per second."""
    width, height = _check_geometry(geometry)
    if duration <= 0:
        raise ValidationError("duration must be positive")
    rng = np.random.default_rng(seed)
    dur_us = int(round(duration * 1e6))
    n = int(rng.poisson(rate * duration * width * height)) if rate > 0 else 0
    t = np.sort(rng.integers(0, dur_us, size=n), kind="stable")
    x = rng.integers(0, width, size=n)
    y = rng.integers(0, height, size=n)
    p = rng.integers(0, 2, size=n)
    return EventStream(width, height, t, x, y, p)


def synth_moving_bar(geometry, velocity: float, duration: float, noise_rate: float = 0.0,
                     seed: int = 0, bar_width: int = 2, x0: Optional[int] = None,
                     rows: Optional[Tuple[int, int]] = None) -> EventStream:
    """Vertical bar sweeping horizontally at ``velocity`` pixels per second.

    The bar covers columns ``[pos, pos + bar_width)`` with ``pos = x0 + v*t``
    (truncated). Its appearance at t=0 emits ON events for every covered pixel;
    afterwards each integer step of ``pos`` fires ON on the column it enters and
    OFF on the column it leaves. ``rows`` restricts the bar's vertical extent.
    """
    width, height = _check_geometry(geometry)
    if duration <= 0:
        raise ValidationError("duration must be positive")
    dur_us = int(round(duration * 1e6))
    if x0 is None:
        x0 = 0 if velocity >= 0 else width - bar_width
    r0, r1 = rows if rows is not None else (0, height)
    ys = np.arange(max(r0, 0), min(r1, height))

    cols_t, cols_x, cols_p = [], [], []

    def emit(t_us, col, pol):
        if 0 <= col < width:
            cols_t.append(t_us)
            cols_x.append(col)
            cols_p.append(pol)

    for c in range(x0, x0 + bar_width):
        emit(0, c, ON)
    if velocity != 0:
        step = 1 if velocity > 0 else -1
        k = 1
        while True:
            t_us = int(np.ceil(k / abs(velocity) * 1e6))
            if t_us >= dur_us:
                break
            left = x0 + step * k
            if step > 0:
                emit(t_us, left + bar_width - 1, ON)
                emit(t_us, left - 1, OFF)
            else:
                emit(t_us, left, ON)
                emit(t_us, left + bar_width, OFF)
            if left >= width or left + bar_width <= 0:
                break
            k += 1

    t = np.repeat(np.asarray(cols_t, dtype=np.int64), len(ys))
    x = np.repeat(np.asarray(cols_x, dtype=np.int64), len(ys))
    p = np.repeat(np.asarray(cols_p, dtype=np.int64), len(ys))
    y = np.tile(ys, len(cols_t))
    bar = EventStream(width, height, t, x, y, p)
    if noise_rate > 0:
        bar = bar.merge(synth_noise(geometry, noise_rate, duration, seed))
    return bar


def synth_flicker(geometry, box: Tuple[int, int, int, int], times_us: Sequence[int],
                  fill=1.0, seed: int = 0, polarity: int = ON) -> EventStream:
    """A rectangular blob ``(x0, y0, w, h)`` that flashes at each of ``times_us``.

    Each flash emits one event per blob pixel; with ``fill < 1`` every pixel
    independently takes part with that probability. ``fill`` may also give
    one probability per flash (in time order).
    """
    width, height = _check_geometry(geometry)
    x0, y0, bw, bh = box
    xs, ys = np.meshgrid(np.arange(x0, x0 + bw), np.arange(y0, y0 + bh))
    xs, ys = xs.ravel(), ys.ravel()
    inside = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    xs, ys = xs[inside], ys[inside]
    rng = np.random.default_rng(seed)
    times = sorted(int(t) for t in times_us)
    fills = np.broadcast_to(np.asarray(fill, dtype=float), (len(times),))
    cols = []
    for t_us, fl in zip(times, fills):
        keep = rng.random(len(xs)) < fl if fl < 1.0 else np.ones(len(xs), bool)
        n = int(keep.sum())
        cols.append((np.full(n, t_us), xs[keep], ys[keep], np.full(n, polarity)))
    if not cols:
        return EventStream.empty(width, height)
    t, x, y, p = (np.concatenate(c) for c in zip(*cols))
    return EventStream(width, height, t, x, y, p)


# --------------------------------------------------------------------------- #
# Binning
# --------------------------------------------------------------------------- #


def bin_indices(t: np.ndarray, T: int) -> np.ndarray:
    """Time-bin index of every timestamp over the stream's own [t_min, t_max]."""
    if len(t) == 0:
        return np.zeros(0, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    t_min, t_max = int(t.min()), int(t.max())
    return np.minimum(T - 1, (T * (t - t_min)) // (t_max - t_min + 1))


def bin_to_frames(stream: EventStream, T: int, H_out: Optional[int] = None,
                  W_out: Optional[int] = None) -> np.ndarray:
    """Accumulate events into a binary ``(T, 2, H_out, W_out)`` uint8 tensor.

    Channel 0 holds OFF events, channel 1 ON. A cell is 1 when at least one
    event of that polarity lands in it; spatial reduction is block-max.
    """
    if T < 1:
        raise ValidationError(f"timestep count must be >= 1, got {T}")
    H_out = stream.height if H_out is None else H_out
    W_out = stream.width if W_out is None else W_out
    if H_out < 1 or W_out < 1 or stream.height % H_out or stream.width % W_out:
        raise ValidationError(
            f"output {H_out}x{W_out} does not divide sensor {stream.height}x{stream.width}"
        )
    bh, bw = stream.height // H_out, stream.width // W_out
    frames = np.zeros((T, 2, H_out, W_out), dtype=np.uint8)
    if len(stream):
        frames[bin_indices(stream.t, T), stream.p, stream.y // bh, stream.x // bw] = 1
    return frames

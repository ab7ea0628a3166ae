"""
Event streams, temporal segmentation and voxel-grid encoding.

On-disk formats:

* ``evsign-events v1`` text: header ``# evsign-events v1 width=<W> height=<H>``
  (optionally followed by ``t_start=<us> t_end=<us>``), then one ``t_us,x,y,p``
  record per line. Blank lines and lines starting with ``#`` are ignored.
* ``EVVG`` binary voxel container: ``<4sH4I`` header (magic, version, P, B, H, W)
  followed by P*B*H*W little-endian float32 values, W fastest.
"""
import math
import re
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from evsign.constants import EVENT_HEADER, VOXEL_MAGIC, VOXEL_VERSION
from evsign.errors import EventFormatError, VoxelFormatError

_HEADER_RE = re.compile(r"^# evsign-events v1 width=(\d+) height=(\d+)((?:\s+\w+=\d+)*)\s*$")
_VOXEL_HEADER = struct.Struct("<4sH4I")
MAX_VOXEL_ELEMENTS = 2 ** 31 - 1


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int


class EventStream:
    """Time-sorted events of one sensor window, stored column-wise.

    The columns are read-only numpy arrays, so a stream can be handed between
    threads and cached without copying.
    """

    __slots__ = ("t", "x", "y", "p", "width", "height", "t_start", "t_end")

    def __init__(self, t, x, y, p, width: int, height: int,
                 t_start: Optional[int] = None, t_end: Optional[int] = None):
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        p = np.asarray(p, dtype=np.int64).reshape(-1)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise EventFormatError("event columns have different lengths")
        if width < 1 or height < 1:
            raise EventFormatError(f"sensor size must be positive, got {width}x{height}")
        if len(t):
            if (t < 0).any():
                raise EventFormatError("timestamps must be non-negative")
            if (np.diff(t) < 0).any():
                raise EventFormatError("events are not sorted by timestamp")
            if (x < 0).any() or (x >= width).any() or (y < 0).any() or (y >= height).any():
                raise EventFormatError(f"coordinate out of bounds for {width}x{height} sensor")
            if not np.isin(p, (-1, 1)).all():
                raise EventFormatError("polarity must be -1 or +1")
        t_start = (int(t[0]) if len(t) else 0) if t_start is None else int(t_start)
        t_end = (int(t[-1]) if len(t) else t_start) if t_end is None else int(t_end)
        if t_start > t_end:
            raise EventFormatError(f"t_start {t_start} is after t_end {t_end}")
        if len(t) and (t[0] < t_start or t[-1] > t_end):
            raise EventFormatError(f"events fall outside [{t_start}, {t_end}]")
        for arr in (t, x, y, p):
            arr.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "width", int(width))
        object.__setattr__(self, "height", int(height))
        object.__setattr__(self, "t_start", t_start)
        object.__setattr__(self, "t_end", t_end)

    def __setattr__(self, name, value):
        raise AttributeError("EventStream is immutable")

    @classmethod
    def from_events(cls, events: Iterable[Event], width: int, height: int,
                    t_start: Optional[int] = None, t_end: Optional[int] = None) -> "EventStream":
        events = sorted(events, key=lambda e: e.t)
        cols = np.array([(e.t, e.x, e.y, e.p) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], width, height, t_start, t_end)

    @classmethod
    def empty(cls, width: int, height: int, t_start: int = 0, t_end: Optional[int] = None) -> "EventStream":
        return cls([], [], [], [], width, height, t_start, t_start if t_end is None else t_end)

    @staticmethod
    def concatenate(streams: Sequence["EventStream"], t_start: int, t_end: int) -> "EventStream":
        if not streams:
            raise ValueError("nothing to concatenate")
        cat = lambda name: np.concatenate([getattr(s, name) for s in streams])
        return EventStream(cat("t"), cat("x"), cat("y"), cat("p"),
                           streams[0].width, streams[0].height, t_start, t_end)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(t, x, y, p)

    @property
    def events(self) -> List[Event]:
        return list(self)

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start

    def shifted(self, dt: int) -> "EventStream":
        return EventStream(self.t + dt, self.x, self.y, self.p, self.width, self.height,
                           self.t_start + dt, self.t_end + dt)

    def select(self, index, t_start: int, t_end: int) -> "EventStream":
        return EventStream(self.t[index], self.x[index], self.y[index], self.p[index],
                           self.width, self.height, t_start, t_end)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return ((self.width, self.height, self.t_start, self.t_end)
                == (other.width, other.height, other.t_start, other.t_end)
                and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "txyp"))

    def __repr__(self) -> str:
        return (f"EventStream(n={len(self)}, {self.width}x{self.height}, "
                f"t=[{self.t_start}, {self.t_end}])")


@dataclass(frozen=True)
class VoxelGrid:
    """Dense ``P x B x H x W`` float32 encoding of a clip."""
    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 4:
            raise VoxelFormatError(f"voxel grid must be 4-D (P, B, H, W), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise VoxelFormatError("voxel grid holds non-finite values")

    @property
    def P(self) -> int:
        return self.data.shape[0]

    @property
    def B(self) -> int:
        return self.data.shape[1]

    @property
    def H(self) -> int:
        return self.data.shape[2]

    @property
    def W(self) -> int:
        return self.data.shape[3]


# ============================ event files ============================

def parse_event_file(data: Union[bytes, str]) -> EventStream:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise EventFormatError(f"event file is not UTF-8: {e}")
    lines = data.splitlines()
    if not lines:
        raise EventFormatError("empty event file (missing header)")
    match = _HEADER_RE.match(lines[0].strip())
    if match is None:
        raise EventFormatError(f"malformed header: {lines[0][:80]!r}")
    width, height = int(match.group(1)), int(match.group(2))
    extras = dict(kv.split("=") for kv in match.group(3).split())
    unknown = set(extras) - {"t_start", "t_end"}
    if unknown:
        raise EventFormatError(f"malformed header: unknown fields {sorted(unknown)}")

    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise EventFormatError(f"line {lineno}: expected 't_us,x,y,p', got {line!r}")
        try:
            t, x, y, p = (int(f) for f in fields)
        except ValueError:
            raise EventFormatError(f"line {lineno}: non-integer field in {line!r}")
        if t < 0:
            raise EventFormatError(f"line {lineno}: negative timestamp")
        if not (0 <= x < width and 0 <= y < height):
            raise EventFormatError(f"line {lineno}: coordinate out of bounds ({x}, {y}) for {width}x{height}")
        if p not in (-1, 1):
            raise EventFormatError(f"line {lineno}: polarity must be -1 or +1, got {p}")
        rows.append((t, x, y, p))

    cols = np.array(rows, dtype=np.int64).reshape(-1, 4)
    order = np.argsort(cols[:, 0], kind="stable")
    cols = cols[order]
    t_start = int(extras["t_start"]) if "t_start" in extras else None
    t_end = int(extras["t_end"]) if "t_end" in extras else None
    return EventStream(cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3], width, height, t_start, t_end)


def write_event_file(stream: EventStream) -> bytes:
    header = (f"{EVENT_HEADER} width={stream.width} height={stream.height} "
              f"t_start={stream.t_start} t_end={stream.t_end}")
    body = [f"{t},{x},{y},{p}" for t, x, y, p in
            zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist())]
    return ("\n".join([header, *body]) + "\n").encode("utf-8")


# ============================ encoding ============================

def segment_stream(stream: EventStream, P: int) -> List[EventStream]:
    """Split into ``P`` equal, non-overlapping windows; the last one is closed on the right.

    Window k covers ``[t_start + k*span/P, t_start + (k+1)*span/P)``; each returned
    sub-stream carries integer bounds that enclose its window.
    """
    if P < 1:
        raise ValueError(f"segment count must be >= 1, got {P}")
    span = stream.duration
    if span == 0:
        k = np.zeros(len(stream), dtype=np.int64)
    else:
        k = np.minimum(((stream.t - stream.t_start) * P) // span, P - 1)
    segments = []
    for i in range(P):
        lo = stream.t_start + (i * span) // P
        hi = stream.t_end if i == P - 1 else stream.t_start + ((i + 1) * span) // P
        segments.append(stream.select(k == i, lo, hi))
    return segments


def segments_for_window(stream: EventStream, window_us: int) -> int:
    if window_us <= 0:
        raise ValueError(f"window_us must be positive, got {window_us}")
    return max(1, math.ceil(stream.duration / window_us))


def bilinear_time_weights(t, B: int, t0: int, t1: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-event temporal deposit: ``(lower bin, lower weight, upper bin, upper weight)``.

    The two weights of an event always sum to 1.
    """
    if B < 1:
        raise ValueError(f"bin count must be >= 1, got {B}")
    t = np.asarray(t, dtype=np.float64)
    if t1 == t0:
        t_star = np.zeros_like(t)
    else:
        t_star = (B - 1) * (t - t0) / float(t1 - t0)
    t_star = np.clip(t_star, 0.0, B - 1)
    lower = np.floor(t_star).astype(np.int64)
    lower = np.minimum(lower, B - 1)
    frac = t_star - lower
    upper = np.minimum(lower + 1, B - 1)
    return lower, 1.0 - frac, upper, frac


def voxelize_segment(events: EventStream, B: int, H: int, W: int, t0: int, t1: int) -> torch.Tensor:
    """Bilinearly deposit event polarities into ``B`` temporal bins -> ``B x H x W`` float32."""
    grid = np.zeros(B * H * W, dtype=np.float64)
    if len(events):
        lower, w_lo, upper, w_hi = bilinear_time_weights(events.t, B, t0, t1)
        pix = events.y * W + events.x
        pol = events.p.astype(np.float64)
        np.add.at(grid, lower * H * W + pix, pol * w_lo)
        np.add.at(grid, upper * H * W + pix, pol * w_hi)
    return torch.from_numpy(grid.reshape(B, H, W).astype(np.float32))


def encode_clip(stream: EventStream, P: int, B: int) -> VoxelGrid:
    segments = segment_stream(stream, P)
    data = torch.stack([
        voxelize_segment(seg, B, stream.height, stream.width, seg.t_start, seg.t_end) for seg in segments
    ])
    return VoxelGrid(data)


# ============================ voxel container ============================

def write_voxel(grid: VoxelGrid) -> bytes:
    dims = tuple(grid.data.shape)
    if any(d > 0xFFFFFFFF for d in dims) or math.prod(dims) > MAX_VOXEL_ELEMENTS:
        raise VoxelFormatError(f"dimension overflow: {dims}")
    header = _VOXEL_HEADER.pack(VOXEL_MAGIC, VOXEL_VERSION, *dims)
    payload = grid.data.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
    return header + payload


def read_voxel(data: bytes) -> VoxelGrid:
    if len(data) < _VOXEL_HEADER.size:
        raise VoxelFormatError(f"truncated header ({len(data)} bytes)")
    magic, version, P, B, H, W = _VOXEL_HEADER.unpack_from(data)
    if magic != VOXEL_MAGIC:
        raise VoxelFormatError(f"bad magic {magic!r}")
    if version != VOXEL_VERSION:
        raise VoxelFormatError(f"unsupported voxel version {version}")
    n = P * B * H * W
    if n > MAX_VOXEL_ELEMENTS:
        raise VoxelFormatError(f"dimension overflow: {(P, B, H, W)}")
    payload = memoryview(data)[_VOXEL_HEADER.size:]
    if len(payload) < 4 * n:
        raise VoxelFormatError(f"truncated payload: expected {4 * n} bytes, got {len(payload)}")
    if len(payload) > 4 * n:
        raise VoxelFormatError(f"trailing bytes after payload ({len(payload) - 4 * n})")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(P, B, H, W)
    return VoxelGrid(torch.from_numpy(values.copy()))

"""Event-stream data model: I/O, windowing, voxel-grid encoding, CFA splitting.

Streams are stored as plain numpy arrays (t: float64 seconds, x/y: uint16,
p: int8 in {-1,+1}) wrapped in an immutable EventStream. All operations
return new objects; nothing mutates in place.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

EVB_MAGIC = b"EVB1"
_EVB_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class EventFormatError(ValueError):
    """Malformed or inconsistent event data (text or binary)."""


@dataclass(frozen=True)
class EventStream:
    """Time-ordered events on a W x H sensor."""

    width: int
    height: int
    t: np.ndarray  # float64 seconds, non-decreasing
    x: np.ndarray  # uint16 column
    y: np.ndarray  # uint16 row
    p: np.ndarray  # int8 polarity, -1 or +1

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise EventFormatError("event field lengths disagree")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise EventFormatError("timestamps decrease")
            if self.x.max() >= self.width or self.y.max() >= self.height:
                raise EventFormatError("event coordinate out of sensor bounds")
            if not np.all(np.abs(self.p) == 1):
                raise EventFormatError("polarity must be -1 or +1")

    def __len__(self) -> int:
        return len(self.t)

    def slice(self, lo: int, hi: int) -> "EventStream":
        return EventStream(self.width, self.height,
                           self.t[lo:hi], self.x[lo:hi], self.y[lo:hi], self.p[lo:hi])

    @staticmethod
    def empty(width: int, height: int) -> "EventStream":
        return EventStream(width, height,
                           np.empty(0, np.float64), np.empty(0, np.uint16),
                           np.empty(0, np.uint16), np.empty(0, np.int8))

    @staticmethod
    def from_arrays(width, height, t, x, y, p) -> "EventStream":
        return EventStream(int(width), int(height),
                           np.asarray(t, np.float64), np.asarray(x, np.uint16),
                           np.asarray(y, np.uint16), np.asarray(p, np.int8))


@dataclass(frozen=True)
class EventWindow:
    """A contiguous, non-overlapping slice of a stream with its time span."""

    events: EventStream
    t_start: float
    t_end: float

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class EventTensor:
    """B x H x W voxel grid of bilinearly binned polarities."""

    values: np.ndarray  # (bins, height, width) float

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("event tensor must be (bins, height, width)")

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @staticmethod
    def zeros(bins: int, height: int, width: int) -> "EventTensor":
        """Explicit all-zero tensor, e.g. for empty duration windows."""
        return EventTensor(np.zeros((bins, height, width), np.float32))


def parse_event_text(source: bytes | str) -> EventStream:
    """Parse the text event format.

    First line is "W H"; each following line is "t x y p" with p in
    {0,1} or {-1,1} (0 is stored as -1). Raises EventFormatError with the
    offending line number on malformed input.
    """
    if isinstance(source, bytes):
        source = source.decode("ascii")
    lines = source.splitlines()
    if not lines:
        raise EventFormatError("line 1: missing 'W H' header")
    head = lines[0].split()
    if len(head) != 2:
        raise EventFormatError("line 1: expected 'W H'")
    try:
        width, height = int(head[0]), int(head[1])
    except ValueError:
        raise EventFormatError("line 1: expected integer 'W H'") from None
    if width <= 0 or height <= 0:
        raise EventFormatError("line 1: sensor size must be positive")

    ts, xs, ys, ps = [], [], [], []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise EventFormatError(f"line {i}: expected 't x y p'")
        try:
            t = float(parts[0])
            x = int(parts[1])
            y = int(parts[2])
            p = int(parts[3])
        except ValueError:
            raise EventFormatError(f"line {i}: non-numeric field") from None
        if not (0 <= x < width and 0 <= y < height):
            raise EventFormatError(f"line {i}: coordinate ({x},{y}) out of bounds "
                                   f"for {width}x{height}")
        if p == 0:
            p = -1
        if p not in (-1, 1):
            raise EventFormatError(f"line {i}: polarity {p} not in {{0,1,-1}}")
        if ts and t < ts[-1]:
            raise EventFormatError(f"line {i}: timestamp decreases")
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)
    return EventStream.from_arrays(width, height, ts, xs, ys, ps)


def format_event_text(stream: EventStream) -> str:
    """Inverse of parse_event_text (polarity written as -1/1)."""
    lines = [f"{stream.width} {stream.height}"]
    for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
        lines.append(f"{t:.9f} {x} {y} {p}")
    return "\n".join(lines) + "\n"


def write_event_binary(stream: EventStream) -> bytes:
    """Serialize to the EVB1 binary format (little-endian)."""
    header = EVB_MAGIC + struct.pack("<HHQ", stream.width, stream.height, len(stream))
    rec = np.empty(len(stream), _EVB_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    return header + rec.tobytes()


def read_event_binary(data: bytes) -> EventStream:
    """Parse the EVB1 binary format; inverse of write_event_binary."""
    if len(data) < 16:
        raise EventFormatError("truncated header (need 16 bytes)")
    if data[:4] != EVB_MAGIC:
        raise EventFormatError(f"bad magic {data[:4]!r}, expected {EVB_MAGIC!r}")
    width, height, count = struct.unpack("<HHQ", data[4:16])
    expected = 16 + count * _EVB_RECORD.itemsize
    if len(data) < expected:
        raise EventFormatError(f"truncated payload: header declares {count} records, "
                               f"got {(len(data) - 16) // _EVB_RECORD.itemsize}")
    rec = np.frombuffer(data[16:expected], _EVB_RECORD)
    return EventStream(width, height,
                       rec["t"].copy(), rec["x"].copy(), rec["y"].copy(), rec["p"].copy())


def window_by_count(stream: EventStream, n: int) -> list[EventWindow]:
    """Split into consecutive windows of exactly n events; remainder dropped."""
    if n < 1:
        raise ValueError("window size must be >= 1")
    windows = []
    for k in range(len(stream) // n):
        ev = stream.slice(k * n, (k + 1) * n)
        windows.append(EventWindow(ev, float(ev.t[0]), float(ev.t[-1])))
    return windows


def window_by_duration(stream: EventStream, tau: float) -> list[EventWindow]:
    """Split into half-open intervals [k*tau, (k+1)*tau) from the first event.

    Empty intervals yield empty windows; the caller decides whether to skip
    them or encode zero tensors.
    """
    if tau <= 0:
        raise ValueError("window duration must be > 0")
    if len(stream) == 0:
        return []
    t0 = float(stream.t[0])
    span = float(stream.t[-1]) - t0
    n_windows = int(np.floor(span / tau)) + 1
    edges = t0 + tau * np.arange(n_windows + 1)
    idx = np.searchsorted(stream.t, edges, side="left")
    # Last event sits exactly on the final edge; keep it in the last window.
    idx[-1] = len(stream)
    windows = []
    for k in range(n_windows):
        ev = stream.slice(int(idx[k]), int(idx[k + 1]))
        windows.append(EventWindow(ev, float(edges[k]), float(edges[k + 1])))
    return windows


def encode_voxel_grid(window: EventWindow, bins: int, height: int, width: int,
                      dtype=np.float32) -> EventTensor:
    """Encode a window as a B x H x W voxel grid.

    Each event distributes its polarity to the two temporally closest bins
    with weights max(0, 1 - |bin - t*|), where t* = (B-1)(t - t0)/dT. A
    window whose events are all simultaneous (dT = 0) puts everything in
    bin 0. Empty windows are an error; use EventTensor.zeros for those.
    """
    ev = window.events
    n = len(ev)
    if n == 0:
        raise ValueError("cannot encode an empty window; use EventTensor.zeros")
    if bins < 1:
        raise ValueError("need at least one temporal bin")
    dt = float(ev.t[-1]) - float(ev.t[0])
    if dt > 0 and bins > 1:
        tstar = (bins - 1) * (ev.t - ev.t[0]) / dt
    else:
        tstar = np.zeros(n)
    lo = np.floor(tstar).astype(np.int64)
    frac = tstar - lo
    pol = ev.p.astype(np.float64)
    flat_pix = ev.y.astype(np.int64) * width + ev.x.astype(np.int64)
    plane = height * width

    # bincount over flattened (bin, y, x) indices; the upper bin of the last
    # event is bins-1 with weight 0, clip keeps the index in range.
    hi = np.minimum(lo + 1, bins - 1)
    idx = np.concatenate([lo * plane + flat_pix, hi * plane + flat_pix])
    w = np.concatenate([pol * (1.0 - frac), pol * frac])
    grid = np.bincount(idx, weights=w, minlength=bins * plane)
    return EventTensor(grid.reshape(bins, height, width).astype(dtype))


def normalize_tensor(tensor: EventTensor) -> EventTensor:
    """Shift/scale the nonzero entries to mean 0, std 1 (population std).

    Zero entries stay zero. If the nonzero std is below 1e-8 the nonzero
    entries are set to 0 instead of being amplified.
    """
    values = tensor.values.copy()
    mask = values != 0
    if not mask.any():
        return EventTensor(values)
    nz = values[mask]
    mean = nz.mean()
    std = nz.std()
    if std < 1e-8:
        values[mask] = 0.0
    else:
        values[mask] = (nz - mean) / std
    return EventTensor(values)


#: supported 2x2 CFA tiles, row-major: (phase_x, phase_y) -> color letter
CFA_PATTERNS = {
    "RGGB": {(0, 0): "R", (1, 0): "G", (0, 1): "G", (1, 1): "B"},
    "GRBG": {(0, 0): "G", (1, 0): "R", (0, 1): "B", (1, 1): "G"},
    "GBRG": {(0, 0): "G", (1, 0): "B", (0, 1): "R", (1, 1): "G"},
    "BGGR": {(0, 0): "B", (1, 0): "G", (0, 1): "G", (1, 1): "R"},
}

#: phase order in which split_cfa returns sub-streams
CFA_PHASES = ((0, 0), (1, 0), (0, 1), (1, 1))


def split_cfa(stream: EventStream, pattern: str = "RGGB") -> dict[tuple[int, int], EventStream]:
    """Split a color-CFA stream into 4 quarter-resolution sub-streams.

    Returns {(phase_x, phase_y): stream at (W/2) x (H/2)}; each event is
    routed by its pixel's 2x2 phase with halved coordinates. Per-sub-stream
    time order is preserved. Requires even sensor dimensions.
    """
    if pattern not in CFA_PATTERNS:
        raise ValueError(f"unknown CFA pattern {pattern!r}")
    if stream.width % 2 or stream.height % 2:
        raise ValueError("CFA split needs even sensor dimensions")
    w2, h2 = stream.width // 2, stream.height // 2
    out = {}
    px = stream.x % 2
    py = stream.y % 2
    for phase in CFA_PHASES:
        m = (px == phase[0]) & (py == phase[1])
        out[phase] = EventStream(w2, h2, stream.t[m],
                                 (stream.x[m] // 2).astype(np.uint16),
                                 (stream.y[m] // 2).astype(np.uint16),
                                 stream.p[m])
    return out


def cfa_color_of(pattern: str, phase: tuple[int, int]) -> str:
    return CFA_PATTERNS[pattern][phase]

"""Event-camera simulator: textured plane under smooth homographic camera
motion, per-pixel log-brightness interpolation with contrast-threshold
crossings, ground-truth frames and analytic optical flow.

All randomness flows from a single numpy Generator, so a fixed seed gives
byte-identical sequences.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventStream, read_event_binary, write_event_binary

LOG_EPS = 1e-3  # dark offset inside ln(I + eps); keeps log finite at I=0
FLW_MAGIC = b"FLW1"


# ---------------------------------------------------------------------------
# scene textures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneTexture:
    """Grayscale plane texture, intensities in [0,1]."""

    intensity: np.ndarray  # (height, width) float64 in [0,1]

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]


def procedural_texture(width: int, height: int, rng: np.random.Generator,
                       n_shapes: int = 12) -> SceneTexture:
    """Multi-scale noise plus random geometric shapes.

    Gives textures with both broadband detail and sharp edges, which is what
    the contrast-threshold model needs to produce a healthy event mix.
    """
    img = np.zeros((height, width))
    scale = 4
    amp = 1.0
    while scale <= min(width, height):
        grid = rng.standard_normal((scale, scale))
        img += amp * _upsample_to(grid, height, width)
        amp *= 0.55
        scale *= 2
    img -= img.min()
    if img.max() > 0:
        img /= img.max()
    img = 0.15 + 0.7 * img  # keep away from hard black/white before shapes

    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(n_shapes):
        kind = rng.integers(3)
        level = rng.uniform(0.05, 0.95)
        if kind == 0:  # filled rectangle
            w = rng.integers(width // 16 + 2, width // 3)
            h = rng.integers(height // 16 + 2, height // 3)
            x0 = rng.integers(0, width - w)
            y0 = rng.integers(0, height - h)
            img[y0:y0 + h, x0:x0 + w] = level
        elif kind == 1:  # filled disk
            r = rng.integers(min(width, height) // 20 + 2, min(width, height) // 5)
            cx = rng.integers(r, width - r)
            cy = rng.integers(r, height - r)
            img[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = level
        else:  # thick line segment
            x0, x1 = rng.uniform(0, width, 2)
            y0, y1 = rng.uniform(0, height, 2)
            thick = rng.uniform(1.0, max(2.0, width / 40))
            dx, dy = x1 - x0, y1 - y0
            norm = np.hypot(dx, dy) + 1e-12
            dist = np.abs(dy * (xx - x0) - dx * (yy - y0)) / norm
            along = ((xx - x0) * dx + (yy - y0) * dy) / norm
            img[(dist <= thick) & (along >= 0) & (along <= norm)] = level
    return SceneTexture(np.clip(img, 0.0, 1.0))


def _upsample_to(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsample a coarse grid to (height, width)."""
    gh, gw = grid.shape
    ys = np.linspace(0, gh - 1, height)
    xs = np.linspace(0, gw - 1, width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + grid[np.ix_(y1, x0)] * fy * (1 - fx)
            + grid[np.ix_(y0, x1)] * (1 - fy) * fx
            + grid[np.ix_(y1, x1)] * fy * fx)


def load_texture(path: str | Path) -> SceneTexture:
    """Load a PGM (P5) or PPM (P6, converted to luma) image as a texture."""
    img = _read_pnm(Path(path))
    if img.ndim == 3:
        img = img @ np.array([0.299, 0.587, 0.114])
    return SceneTexture(img)


# ---------------------------------------------------------------------------
# camera trajectory (parametric 2D homography)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Smooth planar camera motion h(t) with h(0) = identity.

    The homography is an affine map about the sensor center composed of
    translation, rotation, isotropic zoom (log scale) and shear. Each
    parameter follows a cubic polynomial in t/duration with zero constant
    term, so the start pose is exactly the identity and the motion is C^1.
    Coefficient rows: [tx, ty, angle, log_zoom, shear_x, shear_y] x [u, u^2, u^3].
    """

    duration: float
    coeffs: np.ndarray  # (6, 3)

    @staticmethod
    def random(duration: float, rng: np.random.Generator,
               sensor_size: tuple[int, int] = (64, 64),
               motion_scale: float = 1.0) -> "Trajectory":
        w, h = sensor_size
        scales = motion_scale * np.array([0.22 * w, 0.22 * h, 0.35, 0.18, 0.12, 0.12])
        coeffs = rng.uniform(-1.0, 1.0, size=(6, 3)) * scales[:, None] / 3.0
        return Trajectory(float(duration), coeffs)

    @staticmethod
    def static(duration: float) -> "Trajectory":
        return Trajectory(float(duration), np.zeros((6, 3)))

    def params(self, t: float) -> np.ndarray:
        u = 0.0 if self.duration == 0 else t / self.duration
        basis = np.array([u, u * u, u ** 3])
        return self.coeffs @ basis

    def matrix(self, t: float, width: int, height: int) -> np.ndarray:
        """3x3 homography (texture-plane -> sensor) at time t, acting about
        the sensor center."""
        tx, ty, ang, lz, kx, ky = self.params(t)
        c, s = np.cos(ang), np.sin(ang)
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, kx], [ky, 1.0]])
        lin = np.exp(lz) * rot @ shear
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        m = np.eye(3)
        m[:2, :2] = lin
        m[:2, 2] = [tx + cx - lin[0, 0] * cx - lin[0, 1] * cy,
                    ty + cy - lin[1, 0] * cx - lin[1, 1] * cy]
        return m


# ---------------------------------------------------------------------------
# contrast thresholds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContrastThresholds:
    c_pos: float
    c_neg: float

    def __post_init__(self):
        if self.c_pos < 0.01 or self.c_neg < 0.01:
            raise ValueError("contrast thresholds must be >= 0.01")


THRESHOLD_MEAN = 0.18
THRESHOLD_STD = 0.03


def sample_thresholds(rng: np.random.Generator) -> ContrastThresholds:
    """Draw independent positive/negative thresholds from N(0.18, 0.03^2),
    clamped to >= 0.01."""
    draw = rng.normal(THRESHOLD_MEAN, THRESHOLD_STD, size=2)
    c_pos, c_neg = np.maximum(draw, 0.01)
    return ContrastThresholds(float(c_pos), float(c_neg))


# ---------------------------------------------------------------------------
# rendering and flow
# ---------------------------------------------------------------------------

def render_frame(texture: SceneTexture, homography: np.ndarray,
                 width: int, height: int) -> np.ndarray:
    """Render the sensor view: each pixel samples the texture at
    h^-1(pixel) + center offset, bilinearly, with edge clamping."""
    det = np.linalg.det(homography)
    if abs(det) < 1e-12:
        raise ValueError("singular homography")
    inv = np.linalg.inv(homography)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ones = np.ones_like(xx)
    pts = np.stack([xx, yy, ones])  # (3, H, W)
    src = np.tensordot(inv, pts, axes=1)
    sx = src[0] / src[2] + (texture.width - width) // 2
    sy = src[1] / src[2] + (texture.height - height) // 2
    return _bilinear_sample(texture.intensity, sx, sy)


def _bilinear_sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    h, w = img.shape
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    return (img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
            + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx)


def gt_flow(h_prev: np.ndarray, h_next: np.ndarray,
            width: int, height: int) -> np.ndarray:
    """Backward flow for frame k: flow(u) = h_prev(h_next^-1(u)) - u.

    Warping frame k-1 by this field reproduces frame k. Returns (H, W, 2)
    float64 with (dx, dy) last.
    """
    for m in (h_prev, h_next):
        if abs(np.linalg.det(m)) < 1e-12:
            raise ValueError("singular homography")
    m = h_prev @ np.linalg.inv(h_next)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    pts = np.stack([xx, yy, np.ones_like(xx)])
    src = np.tensordot(m, pts, axes=1)
    dx = src[0] / src[2] - xx
    dy = src[1] / src[2] - yy
    return np.stack([dx, dy], axis=-1)


# ---------------------------------------------------------------------------
# event generation
# ---------------------------------------------------------------------------

def generate_events(frames: np.ndarray, timestamps: np.ndarray,
                    thresholds: ContrastThresholds) -> EventStream:
    """Contrast-threshold event generation from a dense render sequence.

    Per pixel, the log brightness L = ln(I + 1e-3) is linearly interpolated
    between consecutive renders; an event fires each time L departs from the
    per-pixel reference level by >= c_pos (polarity +1) or <= -c_neg (-1),
    and the reference advances by exactly +-C per event. Crossing times are
    interpolated inside the frame interval. Output is merged and time-sorted.
    """
    frames = np.asarray(frames, np.float64)
    timestamps = np.asarray(timestamps, np.float64)
    if frames.ndim != 3 or len(frames) != len(timestamps):
        raise ValueError("need (T, H, W) frames with matching timestamps")
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if np.any(np.diff(timestamps) <= 0):
        raise ValueError("timestamps must be strictly increasing")

    height, width = frames.shape[1:]
    log_frames = np.log(frames + LOG_EPS)
    ref = log_frames[0].copy()
    c_pos, c_neg = thresholds.c_pos, thresholds.c_neg

    xs_flat = np.tile(np.arange(width, dtype=np.uint16), height)
    ys_flat = np.repeat(np.arange(height, dtype=np.uint16), width)

    chunks_t, chunks_x, chunks_y, chunks_p = [], [], [], []
    for k in range(1, len(frames)):
        la = log_frames[k - 1].ravel()
        lb = log_frames[k].ravel()
        ta, tb = timestamps[k - 1], timestamps[k]
        r = ref.ravel()
        d = lb - r
        n_pos = np.where(d > 0, np.floor(d / c_pos), 0.0).astype(np.int64)
        n_neg = np.where(d < 0, np.floor(-d / c_neg), 0.0).astype(np.int64)
        for n_cross, c, sign in ((n_pos, c_pos, 1), (n_neg, c_neg, -1)):
            firing = np.nonzero(n_cross)[0]
            if firing.size == 0:
                continue
            counts = n_cross[firing]
            pix = np.repeat(firing, counts)
            step = np.arange(counts.sum()) - np.repeat(
                np.cumsum(counts) - counts, counts) + 1
            levels = r[pix] + sign * step * c
            slope = lb[pix] - la[pix]
            tt = ta + (levels - la[pix]) / slope * (tb - ta)
            chunks_t.append(tt)
            chunks_x.append(xs_flat[pix])
            chunks_y.append(ys_flat[pix])
            chunks_p.append(np.full(len(pix), sign, np.int8))
        ref += (n_pos * c_pos - n_neg * c_neg).reshape(height, width)

    if not chunks_t:
        return EventStream.empty(width, height)
    t = np.concatenate(chunks_t)
    x = np.concatenate(chunks_x)
    y = np.concatenate(chunks_y)
    p = np.concatenate(chunks_p)
    order = np.lexsort((x, y, t))
    return EventStream(width, height, t[order], x[order], y[order], p[order])


# ---------------------------------------------------------------------------
# full sequence
# ---------------------------------------------------------------------------

@dataclass
class SimConfig:
    width: int = 64
    height: int = 64
    duration: float = 0.5
    f_gt: float = 50.0
    f_sim: float = 1000.0
    seed: int = 0
    texture_path: str | None = None  # default: procedural
    texture_scale: int = 2           # texture dims = scale * sensor dims
    motion_scale: float = 1.0

    def validate(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("sensor size must be at least 2x2")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.f_sim < 10 * self.f_gt:
            raise ValueError("f_sim must be at least 10x f_gt")
        if self.texture_scale < 2:
            raise ValueError("texture must be at least 2x the sensor size")


@dataclass
class SimSequence:
    """One simulated sequence: events plus ground truth."""

    events: EventStream
    gt_timestamps: np.ndarray     # (F,) float64 seconds
    gt_frames: np.ndarray         # (F, H, W) float64 in [0,1], 8-bit quantized
    gt_flows: np.ndarray          # (F-1, H, W, 2) float32; flow[k]: frame k+1 -> k
    thresholds: ContrastThresholds
    seed: int
    config: SimConfig


def simulate_sequence(config: SimConfig,
                      trajectory: Trajectory | None = None,
                      texture: SceneTexture | None = None) -> SimSequence:
    """Simulate one sequence. Deterministic for a fixed seed.

    Ground-truth frames are quantized to 8 bit at generation time so the
    on-disk PGM representation round-trips exactly.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    thresholds = sample_thresholds(rng)
    if texture is None:
        if config.texture_path is not None:
            texture = load_texture(config.texture_path)
        else:
            texture = procedural_texture(config.texture_scale * config.width,
                                         config.texture_scale * config.height, rng)
    if trajectory is None:
        trajectory = Trajectory.random(config.duration, rng,
                                       (config.width, config.height),
                                       config.motion_scale)

    w, h = config.width, config.height
    n_sim = int(round(config.duration * config.f_sim))
    sim_times = np.arange(n_sim + 1) / config.f_sim
    sim_frames = np.empty((n_sim + 1, h, w))
    for i, t in enumerate(sim_times):
        sim_frames[i] = render_frame(texture, trajectory.matrix(t, w, h), w, h)
    events = generate_events(sim_frames, sim_times, thresholds)

    n_gt = int(round(config.duration * config.f_gt))
    gt_times = np.arange(n_gt) / config.f_gt
    gt_frames = np.empty((n_gt, h, w))
    gt_mats = [trajectory.matrix(t, w, h) for t in gt_times]
    for i, m in enumerate(gt_mats):
        gt_frames[i] = np.round(render_frame(texture, m, w, h) * 255.0) / 255.0
    flows = np.empty((max(n_gt - 1, 0), h, w, 2), np.float32)
    for k in range(1, n_gt):
        flows[k - 1] = gt_flow(gt_mats[k - 1], gt_mats[k], w, h)
    return SimSequence(events, gt_times, gt_frames, flows, thresholds,
                       config.seed, config)


# ---------------------------------------------------------------------------
# dataset I/O
# ---------------------------------------------------------------------------

def write_pgm(path: Path, img: np.ndarray):
    """8-bit binary PGM (P5)."""
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    img = _read_pnm(path)
    if img.ndim != 2:
        raise ValueError(f"{path}: expected grayscale PGM")
    return img


def write_ppm(path: Path, img: np.ndarray):
    """8-bit binary PPM (P6); img is (H, W, 3) in [0,1]."""
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def _read_pnm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    m = re.match(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValueError(f"{path}: not a binary PGM/PPM")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PNM supported")
    pixels = np.frombuffer(raw[m.end():], np.uint8)
    if kind == b"P5":
        return pixels[:h * w].reshape(h, w) / 255.0
    return pixels[:h * w * 3].reshape(h, w, 3) / 255.0


def write_flow(path: Path, flow: np.ndarray):
    """FLW1 binary flow: magic, u16 W, u16 H, then W*H little-endian f32
    (dx, dy) pairs, row-major."""
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(FLW_MAGIC + struct.pack("<HH", w, h))
        f.write(flow.astype("<f4").tobytes())


def read_flow(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if raw[:4] != FLW_MAGIC:
        raise ValueError(f"{path}: bad flow magic")
    w, h = struct.unpack("<HH", raw[4:8])
    vals = np.frombuffer(raw[8:8 + w * h * 8], "<f4")
    if vals.size != w * h * 2:
        raise ValueError(f"{path}: truncated flow payload")
    return vals.reshape(h, w, 2).copy()


def write_dataset(sequences: list[SimSequence], out_dir: str | Path) -> list[Path]:
    """Write sequences as seq_NNNN/{events.evb, frames/, flows/,
    timestamps.txt, meta.txt} under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, seq in enumerate(sequences):
        d = out_dir / f"seq_{i:04d}"
        (d / "frames").mkdir(parents=True, exist_ok=True)
        (d / "flows").mkdir(exist_ok=True)
        (d / "events.evb").write_bytes(write_event_binary(seq.events))
        for k, frame in enumerate(seq.gt_frames):
            write_pgm(d / "frames" / f"{k:04d}.pgm", frame)
        for k in range(len(seq.gt_flows)):
            write_flow(d / "flows" / f"{k:04d}.flw", seq.gt_flows[k])
        with open(d / "timestamps.txt", "w") as f:
            for k, t in enumerate(seq.gt_timestamps):
                f.write(f"{k} {t:.17g}\n")
        cfg = seq.config
        with open(d / "meta.txt", "w") as f:
            f.write(f"c_pos={seq.thresholds.c_pos:.6f}\n")
            f.write(f"c_neg={seq.thresholds.c_neg:.6f}\n")
            f.write(f"c_pos_raw={seq.thresholds.c_pos:.17g}\n")
            f.write(f"c_neg_raw={seq.thresholds.c_neg:.17g}\n")
            f.write(f"seed={seq.seed}\n")
            f.write(f"width={cfg.width}\nheight={cfg.height}\n")
            f.write(f"duration={cfg.duration:.17g}\n")
            f.write(f"f_gt={cfg.f_gt:.17g}\nf_sim={cfg.f_sim:.17g}\n")
        paths.append(d)
    return paths


def read_sequence(seq_dir: str | Path) -> SimSequence:
    """Load one sequence directory written by write_dataset."""
    d = Path(seq_dir)
    meta = {}
    for line in (d / "meta.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    thresholds = ContrastThresholds(
        float(meta.get("c_pos_raw", meta["c_pos"])),
        float(meta.get("c_neg_raw", meta["c_neg"])))
    config = SimConfig(width=int(meta["width"]), height=int(meta["height"]),
                       duration=float(meta["duration"]), f_gt=float(meta["f_gt"]),
                       f_sim=float(meta["f_sim"]), seed=int(meta["seed"]))
    events = read_event_binary((d / "events.evb").read_bytes())
    times = []
    for line in (d / "timestamps.txt").read_text().splitlines():
        times.append(float(line.split()[1]))
    gt_times = np.array(times)
    frame_paths = sorted((d / "frames").glob("*.pgm"))
    gt_frames = np.stack([read_pgm(p) for p in frame_paths])
    flow_paths = sorted((d / "flows").glob("*.flw"))
    if flow_paths:
        gt_flows = np.stack([read_flow(p) for p in flow_paths]).astype(np.float32)
    else:
        gt_flows = np.empty((0, config.height, config.width, 2), np.float32)
    return SimSequence(events, gt_times, gt_frames, gt_flows, thresholds,
                       config.seed, config)


def read_dataset(root: str | Path) -> list[SimSequence]:
    dirs = sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith("seq_"))
    if not dirs:
        raise FileNotFoundError(f"no seq_* directories under {root}")
    return [read_sequence(p) for p in dirs]

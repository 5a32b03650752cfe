"""Inference orchestration: stateful stream reconstruction, percentile
post-processing, high-framerate synthesis via temporally shifted parallel
reconstructions, color fusion over a CFA stream, and memory diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .events import (EventStream, EventTensor, cfa_color_of, encode_voxel_grid,
                     normalize_tensor, split_cfa, window_by_count, window_by_duration)
from .simulator import write_pgm, write_ppm


@dataclass(frozen=True)
class Frame:
    """A reconstructed intensity image with its timestamp."""

    timestamp: float
    pixels: np.ndarray  # (H, W) in [0, 1]


@dataclass
class WindowPolicy:
    """Fixed event count or fixed duration windowing for inference."""

    kind: str = "count"      # "count" | "duration"
    count: int = 2000
    duration_s: float = 0.05
    skip_empty: bool = False  # duration mode: skip empty windows instead of
                              # feeding all-zero tensors

    def __post_init__(self):
        if self.kind not in ("count", "duration"):
            raise ValueError(f"unknown window policy {self.kind!r}")
        if self.kind == "count" and self.count < 1:
            raise ValueError("count policy needs count >= 1")
        if self.kind == "duration" and self.duration_s <= 0:
            raise ValueError("duration policy needs a positive duration")


class Reconstructor:
    """Stateful events-to-frames reconstruction with one owner per stream."""

    def __init__(self, weights, config: nn.NetworkConfig,
                 policy: WindowPolicy | None = None, apply_postprocess: bool = True,
                 reset_state_each_window: bool = False):
        self.weights = weights
        self.config = config
        self.policy = policy or WindowPolicy()
        self.apply_postprocess = apply_postprocess
        self.reset_state_each_window = reset_state_each_window
        self.state = None

    def reset(self):
        self.state = None

    def step_tensor(self, tensor: EventTensor, timestamp: float) -> Frame:
        """Feed one (possibly all-zero) event tensor and emit a frame."""
        x = normalize_tensor(tensor).values[None].astype(np.float32)
        if self.reset_state_each_window:
            self.state = None
        img, self.state, _ = nn.forward(x, self.state, self.weights, self.config, "eval")
        img = img[0]
        if self.apply_postprocess:
            img = postprocess(img)
        return Frame(float(timestamp), img)


def reconstruct_stream(stream: EventStream, rec: Reconstructor) -> list[Frame]:
    """Window, encode, normalize, run the network, post-process.

    Frame timestamps are the window's last event time (count windows) or the
    window end (duration windows). State threads across windows unless the
    reconstructor was built with per-window resets.
    """
    bins = rec.config.input_bins
    h, w = stream.height, stream.width
    frames = []
    if rec.policy.kind == "count":
        for win in window_by_count(stream, rec.policy.count):
            tensor = encode_voxel_grid(win, bins, h, w)
            frames.append(rec.step_tensor(tensor, win.events.t[-1]))
    else:
        for win in window_by_duration(stream, rec.policy.duration_s):
            if len(win) == 0:
                if rec.policy.skip_empty:
                    continue
                tensor = EventTensor.zeros(bins, h, w)
            else:
                tensor = encode_voxel_grid(win, bins, h, w)
            frames.append(rec.step_tensor(tensor, win.t_end))
    return frames


def postprocess(image: np.ndarray) -> np.ndarray:
    """Robust min/max normalization: rescale by the 1% and 99% percentiles
    and clip to [0, 1]; nearly-flat images collapse to constant 0.5."""
    lo = np.percentile(image, 1.0)
    hi = np.percentile(image, 99.0)
    if hi - lo < 1e-3:
        return np.full_like(image, 0.5)
    return np.clip((image - lo) / (hi - lo), 0.0, 1.0)


def hfr_synthesize(stream: EventStream, weights, config: nn.NetworkConfig,
                   count: int, shift: int, apply_postprocess: bool = True) -> list[Frame]:
    """High-framerate synthesis: run count/shift independent reconstructions,
    reconstruction j skipping the first j*shift events, and merge the frames
    in (timestamp, offset) order. shift == count reduces to a single plain
    reconstruction."""
    if shift < 1 or shift > count:
        raise ValueError("need 1 <= shift <= count")
    if count % shift:
        raise ValueError(f"shift {shift} must divide the window count {count}")
    tagged = []
    for j in range(count // shift):
        rec = Reconstructor(weights, config, WindowPolicy("count", count=count),
                            apply_postprocess)
        sub = stream.slice(j * shift, len(stream))
        for frame in reconstruct_stream(sub, rec):
            tagged.append((frame.timestamp, j, frame))
    tagged.sort(key=lambda item: (item[0], item[1]))
    return [frame for _, _, frame in tagged]


def deflicker(frames: list[Frame], strength: float) -> list[Frame]:
    """Per-pixel exponential moving average:
    out_k = (1-strength)*in_k + strength*out_{k-1}."""
    if not 0.0 <= strength < 1.0:
        raise ValueError("deflicker strength must be in [0, 1)")
    if strength == 0.0 or not frames:
        return list(frames)
    out = [frames[0]]
    acc = frames[0].pixels.astype(np.float64)
    for frame in frames[1:]:
        acc = (1.0 - strength) * frame.pixels + strength * acc
        out.append(Frame(frame.timestamp, acc.copy()))
    return out


def decay_diagnostic(weights, config: nn.NetworkConfig, warmup: EventStream,
                     empty_steps: int, policy: WindowPolicy | None = None) -> np.ndarray:
    """Memory probe: after warming up on real windows, feed all-zero tensors
    and report the mean absolute change of the raw network output per step."""
    rec = Reconstructor(weights, config, policy or WindowPolicy(),
                        apply_postprocess=False)
    frames = reconstruct_stream(warmup, rec)
    if not frames:
        raise ValueError("warmup stream produced no windows")
    last = frames[-1]
    deltas = np.empty(empty_steps)
    bins = config.input_bins
    for k in range(empty_steps):
        nxt = rec.step_tensor(EventTensor.zeros(bins, warmup.height, warmup.width),
                              last.timestamp)
        deltas[k] = float(np.mean(np.abs(nxt.pixels - last.pixels)))
        last = nxt
    return deltas


# ---------------------------------------------------------------------------
# color reconstruction
# ---------------------------------------------------------------------------

# sRGB (D65) <-> CIE XYZ matrices
_RGB_TO_XYZ = np.array([[0.4124564, 0.3575761, 0.1804375],
                        [0.2126729, 0.7151522, 0.0721750],
                        [0.0193339, 0.1191920, 0.9503041]])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE_D65 = _RGB_TO_XYZ @ np.ones(3)


def _srgb_companding(linear):
    linear = np.clip(linear, 0.0, None)
    return np.where(linear <= 0.0031308, 12.92 * linear,
                    1.055 * np.power(linear, 1.0 / 2.4) - 0.055)


def _srgb_inverse_companding(srgb):
    srgb = np.clip(srgb, 0.0, None)
    return np.where(srgb <= 0.04045, srgb / 12.92,
                    np.power((srgb + 0.055) / 1.055, 2.4))


def _lab_f(t):
    delta = 6.0 / 29.0
    return np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta ** 2) + 4.0 / 29.0)


def _lab_f_inv(u):
    delta = 6.0 / 29.0
    return np.where(u > delta, u ** 3, 3 * delta ** 2 * (u - 4.0 / 29.0))


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] (H, W, 3) to CIELAB with the D65 white point."""
    xyz = _srgb_inverse_companding(rgb) @ _RGB_TO_XYZ.T
    fxyz = _lab_f(xyz / _WHITE_D65)
    lum = 116.0 * fxyz[..., 1] - 16.0
    a = 500.0 * (fxyz[..., 0] - fxyz[..., 1])
    b = 200.0 * (fxyz[..., 1] - fxyz[..., 2])
    return np.stack([lum, a, b], axis=-1)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _lab_f_inv(np.stack([fx, fy, fz], axis=-1)) * _WHITE_D65
    return np.clip(_srgb_companding(xyz @ _XYZ_TO_RGB.T), 0.0, 1.0)


def _catmull_rom(d):
    """Catmull-Rom cubic kernel (a = -0.5)."""
    a = -0.5
    ad = np.abs(d)
    return np.where(ad <= 1.0,
                    (a + 2) * ad ** 3 - (a + 3) * ad ** 2 + 1.0,
                    np.where(ad < 2.0,
                             a * ad ** 3 - 5 * a * ad ** 2 + 8 * a * ad - 4 * a,
                             0.0))


def _bicubic_matrix(n_in: int) -> np.ndarray:
    n_out = 2 * n_in
    src = (np.arange(n_out) + 0.5) / 2.0 - 0.5
    base = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        idx = np.clip(base + tap, 0, n_in - 1)
        wt = _catmull_rom(src - (base + tap))
        np.add.at(m, (np.arange(n_out), idx), wt)
    return m


def bicubic_upsample2x(img: np.ndarray) -> np.ndarray:
    """Separable Catmull-Rom 2x upsampling with edge clamping."""
    ry = _bicubic_matrix(img.shape[0])
    rx = _bicubic_matrix(img.shape[1])
    return ry @ img @ rx.T


def color_reconstruct(stream: EventStream, weights, config: nn.NetworkConfig,
                      pattern: str = "RGGB", count: int = 2000) -> list[Frame]:
    """Full-resolution color reconstruction from a CFA event stream.

    The four filter channels are reconstructed independently at quarter
    resolution, bicubic-upsampled, combined into RGB (the two greens
    averaged), and the LAB luminance is replaced by the full-resolution
    grayscale reconstruction over all events. Returned Frame.pixels are
    (H, W, 3).
    """
    if stream.width % 2 or stream.height % 2:
        raise ValueError("color reconstruction needs even sensor dimensions")
    subs = split_cfa(stream, pattern)
    channel_frames = {}
    for phase, sub in subs.items():
        rec = Reconstructor(weights, config,
                            WindowPolicy("count", count=max(1, count // 4)))
        channel_frames[phase] = reconstruct_stream(sub, rec)

    gray_rec = Reconstructor(weights, config, WindowPolicy("count", count=count))
    gray_frames = reconstruct_stream(stream, gray_rec)
    if not gray_frames:
        return []
    for phase, frames in channel_frames.items():
        if not frames:
            raise ValueError(f"CFA channel {phase} produced no frames; "
                             "lower the window count")

    out = []
    for gframe in gray_frames:
        by_color: dict[str, list[np.ndarray]] = {"R": [], "G": [], "B": []}
        for phase, frames in channel_frames.items():
            times = np.array([f.timestamp for f in frames])
            nearest = frames[int(np.argmin(np.abs(times - gframe.timestamp)))]
            by_color[cfa_color_of(pattern, phase)].append(nearest.pixels)
        rgb_quarter = np.stack([np.mean(by_color["R"], axis=0),
                                np.mean(by_color["G"], axis=0),
                                np.mean(by_color["B"], axis=0)], axis=-1)
        rgb = np.stack([bicubic_upsample2x(rgb_quarter[..., c]) for c in range(3)],
                       axis=-1)
        lab = rgb_to_lab(np.clip(rgb, 0.0, 1.0))
        lab[..., 0] = 100.0 * gframe.pixels
        out.append(Frame(gframe.timestamp, lab_to_rgb(lab)))
    return out


# ---------------------------------------------------------------------------
# frame output
# ---------------------------------------------------------------------------

def write_frames(frames: list[Frame], out_dir: str | Path):
    """PGM (grayscale) or PPM (color) frames plus timestamps.txt with
    9-decimal seconds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "timestamps.txt", "w") as f:
        for k, frame in enumerate(frames):
            f.write(f"{k} {frame.timestamp:.9f}\n")
    for k, frame in enumerate(frames):
        if frame.pixels.ndim == 3:
            write_ppm(out_dir / f"{k:04d}.ppm", frame.pixels)
        else:
            write_pgm(out_dir / f"{k:04d}.pgm", frame.pixels)


def read_frames(frames_dir: str | Path) -> list[Frame]:
    from .simulator import read_pgm

    frames_dir = Path(frames_dir)
    times = {}
    ts_file = frames_dir / "timestamps.txt"
    if ts_file.exists():
        for line in ts_file.read_text().splitlines():
            idx, t = line.split()
            times[int(idx)] = float(t)
    frames = []
    for k, path in enumerate(sorted(frames_dir.glob("*.pgm"))):
        frames.append(Frame(times.get(k, float(k)), read_pgm(path)))
    return frames

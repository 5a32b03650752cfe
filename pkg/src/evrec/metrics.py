"""Evaluation protocol: local histogram equalization, MSE, SSIM, and the
flow-warp temporal error, plus nearest-timestamp frame matching and the
CSV/text evaluation report.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

from .losses import DEFAULT_ALPHA, occlusion_mask, temporal_loss

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MATCH_TOLERANCE_S = 1e-3


# ---------------------------------------------------------------------------
# local histogram equalization (CLAHE)
# ---------------------------------------------------------------------------

def local_hist_eq(image: np.ndarray, tiles: int = 8, clip: float = 2.0,
                  bins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    The image is padded to a tiles x tiles grid, each tile's 256-bin
    histogram is clipped at `clip` times the uniform level (the excess is
    redistributed), and the per-tile equalization maps are blended
    bilinearly between tile centers. Input and output are floats in [0,1].
    """
    h, w = image.shape
    if h < tiles or w < tiles:
        raise ValueError(f"image {h}x{w} smaller than a {tiles}x{tiles} tile grid")
    th = -(-h // tiles)
    tw = -(-w // tiles)
    padded = np.pad(image, ((0, th * tiles - h), (0, tw * tiles - w)), mode="edge")
    v = np.minimum((padded * bins).astype(np.int64), bins - 1)

    area = th * tw
    limit = clip * area / bins
    luts = np.empty((tiles, tiles, bins))
    for r in range(tiles):
        for c in range(tiles):
            tile = v[r * th:(r + 1) * th, c * tw:(c + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / bins
            luts[r, c] = np.cumsum(hist) / area

    gy = np.clip((np.arange(tiles * th) + 0.5) / th - 0.5, 0.0, tiles - 1.0)
    gx = np.clip((np.arange(tiles * tw) + 0.5) / tw - 0.5, 0.0, tiles - 1.0)
    r0 = np.floor(gy).astype(int)
    c0 = np.floor(gx).astype(int)
    r1 = np.minimum(r0 + 1, tiles - 1)
    c1 = np.minimum(c0 + 1, tiles - 1)
    fy = (gy - r0)[:, None]
    fx = (gx - c0)[None, :]
    out = (luts[r0[:, None], c0[None, :], v] * (1 - fy) * (1 - fx)
           + luts[r0[:, None], c1[None, :], v] * (1 - fy) * fx
           + luts[r1[:, None], c0[None, :], v] * fy * (1 - fx)
           + luts[r1[:, None], c1[None, :], v] * fy * fx)
    return np.clip(out[:h, :w], 0.0, 1.0)


# ---------------------------------------------------------------------------
# image quality
# ---------------------------------------------------------------------------

def mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((np.asarray(a, np.float64) - b) ** 2))


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_KERNEL = _gaussian_kernel()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, dynamic range 1, averaged over fully-valid window positions."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}px window")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    pad = SSIM_WINDOW // 2

    def win(x):
        return correlate(x, _SSIM_KERNEL, mode="constant")[pad:-pad, pad:-pad]

    mu_a = win(a)
    mu_b = win(b)
    var_a = win(a * a) - mu_a * mu_a
    var_b = win(b * b) - mu_b * mu_b
    cov = win(a * b) - mu_a * mu_b
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def temporal_error(frames, flows, gts, alpha=DEFAULT_ALPHA) -> float:
    """Mean over consecutive pairs of the masked warping error, with the
    occlusion masks computed from the ground-truth frames."""
    if len(frames) != len(gts) or len(flows) != len(frames) - 1:
        raise ValueError("need one flow per consecutive frame pair and matching gts")
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    vals = []
    for k in range(1, len(frames)):
        mask = occlusion_mask(gts[k], gts[k - 1], flows[k - 1], alpha)
        vals.append(temporal_loss(frames[k], frames[k - 1], flows[k - 1], mask))
    return float(np.mean(vals))


def match_nearest(query_times, ref_times, tol=MATCH_TOLERANCE_S):
    """Pair each reference time with the nearest query within tol seconds.

    Returns (pairs, skipped) where pairs is a list of (query_idx, ref_idx).
    """
    query_times = np.asarray(query_times, np.float64)
    pairs, skipped = [], 0
    for j, t in enumerate(ref_times):
        if len(query_times) == 0:
            skipped += 1
            continue
        i = int(np.argmin(np.abs(query_times - t)))
        if abs(query_times[i] - t) <= tol:
            pairs.append((i, j))
        else:
            skipped += 1
    return pairs, skipped


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------

@dataclass
class EvalRow:
    name: str
    mse: float
    ssim: float
    temporal_error: float
    pairs: int
    skipped: int = 0


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def mean_row(self) -> EvalRow:
        if not self.rows:
            raise ValueError("empty report")
        return EvalRow("mean",
                       float(np.mean([r.mse for r in self.rows])),
                       float(np.mean([r.ssim for r in self.rows])),
                       float(np.mean([r.temporal_error for r in self.rows])),
                       int(np.sum([r.pairs for r in self.rows])),
                       int(np.sum([r.skipped for r in self.rows])))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("sequence,mse,ssim,temporal_error,pairs,skipped\n")
        for r in self.rows + [self.mean_row()]:
            out.write(f"{r.name},{r.mse:.6f},{r.ssim:.6f},{r.temporal_error:.6f},"
                      f"{r.pairs},{r.skipped}\n")
        return out.getvalue()

    def to_text(self) -> str:
        rows = self.rows + [self.mean_row()]
        name_w = max(len(r.name) for r in rows)
        lines = [f"{'sequence':<{name_w}}  {'MSE':>8}  {'SSIM':>8}  {'TempErr':>8}  {'pairs':>5}"]
        for r in rows:
            lines.append(f"{r.name:<{name_w}}  {r.mse:8.4f}  {r.ssim:8.4f}  "
                         f"{r.temporal_error:8.4f}  {r.pairs:5d}")
        return "\n".join(lines)

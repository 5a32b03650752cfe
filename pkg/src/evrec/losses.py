"""Training objective: reconstruction loss plus flow-based temporal
consistency with occlusion weighting.

Images are (H, W) or (batch, H, W); flow fields carry a trailing (dx, dy)
axis. The warp is differentiable w.r.t. the image; flow comes from the
simulator and is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHA = 50.0
DEFAULT_LAMBDA_TC = 5.0
DEFAULT_L0 = 2


@dataclass(frozen=True)
class LossConfig:
    lambda_tc: float = DEFAULT_LAMBDA_TC
    alpha: float = DEFAULT_ALPHA
    l0: int = DEFAULT_L0
    reconstruction: str = "l1"  # "l1" | "mse"

    def __post_init__(self):
        if self.lambda_tc < 0 or self.alpha <= 0 or self.l0 < 0:
            raise ValueError("need lambda_tc >= 0, alpha > 0, l0 >= 0")
        if self.reconstruction not in ("l1", "mse"):
            raise ValueError(f"unknown reconstruction loss {self.reconstruction!r}")


def _warp_weights(image_shape, flow):
    """Corner indices and bilinear weights for sampling at u + flow(u),
    clamped to the image bounds."""
    h, w = image_shape[-2], image_shape[-1]
    if flow.shape[-1] != 2 or flow.shape[-3:-1] != (h, w):
        raise ValueError(f"flow shape {flow.shape} does not match image {image_shape}")
    sx = np.clip(np.arange(w)[None, :] + flow[..., 0], 0.0, w - 1.0)
    sy = np.clip(np.arange(h)[:, None] + flow[..., 1], 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    corners = ((y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
               (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx))
    return corners


def backward_warp(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample `image` at u + flow(u) with bilinear interpolation."""
    warped, _ = backward_warp_fwd(image, flow)
    return warped


def backward_warp_fwd(image, flow):
    corners = _warp_weights(image.shape, flow)
    if image.ndim == 2:
        warped = sum(wt * image[yi, xi] for yi, xi, wt in corners)
    else:
        b = np.arange(image.shape[0])[:, None, None]
        warped = sum(wt * image[b, yi, xi] for yi, xi, wt in corners)
    return warped, (corners, image.shape)


def backward_warp_bwd(gout, cache):
    """Gradient w.r.t. the warped image (bilinear scatter)."""
    corners, shape = cache
    h, w = shape[-2], shape[-1]
    gimage = np.zeros(int(np.prod(shape)), gout.dtype)
    if len(shape) == 2:
        for yi, xi, wt in corners:
            flat = (yi * w + xi).ravel()
            gimage += np.bincount(flat, (wt * gout).ravel(), minlength=gimage.size)
    else:
        b = np.arange(shape[0])[:, None, None]
        for yi, xi, wt in corners:
            flat = ((b * h + yi) * w + xi).ravel()
            gimage += np.bincount(flat, (wt * gout).ravel(), minlength=gimage.size)
    return gimage.reshape(shape)


def occlusion_mask(gt_k, gt_km1, flow, alpha=DEFAULT_ALPHA):
    """exp(-alpha * (I_k - warp(I_{k-1}))^2), in (0, 1]. Small where the
    ground-truth warp itself fails, i.e. at occlusions."""
    err = gt_k - backward_warp(gt_km1, flow)
    return np.exp(-alpha * err * err)


def temporal_loss(img_k, img_km1, flow, mask):
    """Mean over pixels of mask * |img_k - warp(img_km1)|."""
    return float(np.mean(mask * np.abs(img_k - backward_warp(img_km1, flow))))


def temporal_loss_with_grad(img_k, img_km1, flow, mask):
    """Returns (loss, d/d img_k, d/d img_km1)."""
    warped, cache = backward_warp_fwd(img_km1, flow)
    diff = img_k - warped
    loss = float(np.mean(mask * np.abs(diff)))
    g = mask * np.sign(diff) / diff.size
    return loss, g, backward_warp_bwd(-g, cache)


def reconstruction_loss(pred, target, kind="l1"):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if kind == "l1":
        return float(np.mean(np.abs(pred - target)))
    if kind == "mse":
        return float(np.mean((pred - target) ** 2))
    raise ValueError(f"unknown reconstruction loss {kind!r}")


def reconstruction_loss_with_grad(pred, target, kind="l1"):
    diff = pred - target
    if kind == "l1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size
    if kind == "mse":
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    raise ValueError(f"unknown reconstruction loss {kind!r}")


def total_loss(recon_losses, temporal_losses, config: LossConfig) -> float:
    """Weighted unroll objective: sum of reconstruction terms plus
    lambda_tc times the temporal terms from step l0 on.

    temporal_losses[k] is the consistency loss between steps k-1 and k
    (entry 0 is ignored; there is no predecessor)."""
    total = float(np.sum(recon_losses))
    start = max(config.l0, 1)
    if config.lambda_tc > 0 and len(temporal_losses) > start:
        total += config.lambda_tc * float(np.sum(temporal_losses[start:]))
    return total

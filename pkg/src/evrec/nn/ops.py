"""Differentiable tensor primitives (forward + exact backward), numpy only.

Every *_fwd returns (output, cache); the matching *_bwd consumes the cache
and the upstream gradient and returns exact gradients. Tensors are
(batch, channels, height, width) arrays; float32 for training, float64 for
gradient checking. Convolutions are cross-correlations with zero padding
floor(k/2), so odd kernels keep ceil(n/stride) spatial dims.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


# -- convolution ------------------------------------------------------------

def conv2d_fwd(x, w, b, stride=1):
    """Cross-correlation. x: (B,C,H,W), w: (O,C,k,k), b: (O,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weights")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs weight {w.shape[1]}")
    out = _conv_gemm(x, w, stride)
    out += b[None, :, None, None]
    return out, (x, w, stride)


def conv2d_bwd(gout, cache):
    """Returns (gx, gw, gb)."""
    x, w, stride = cache
    n_out, k = w.shape[0], w.shape[2]
    pad = k // 2
    batch, chans, h, wd = x.shape
    ho, wo = gout.shape[2], gout.shape[3]

    cols = _im2col(x, k, stride)                      # (B*Ho*Wo, C*k*k)
    g2 = gout.transpose(0, 2, 3, 1).reshape(-1, n_out)  # (B*Ho*Wo, O)
    gb = gout.sum(axis=(0, 2, 3))
    gw = (g2.T @ cols).reshape(w.shape)

    gcols = (g2 @ w.reshape(n_out, -1)).reshape(batch, ho, wo, chans, k, k)
    gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros((batch, chans, h + 2 * pad, wd + 2 * pad), x.dtype)
    for u in range(k):
        for v in range(k):
            gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += gcols[..., u, v]
    gx = gxp[:, :, pad:pad + h, pad:pad + wd]
    return gx, gw, gb


def _im2col(x, k, stride):
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    batch, chans, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * ho * wo, chans * k * k)


def _conv_gemm(x, w, stride):
    n_out, k = w.shape[0], w.shape[2]
    cols = _im2col(x, k, stride)
    batch = x.shape[0]
    ho = -(-x.shape[2] // stride)
    wo = -(-x.shape[3] // stride)
    out = cols @ w.reshape(n_out, -1).T
    return out.reshape(batch, ho, wo, n_out).transpose(0, 3, 1, 2)


# -- batch normalization -----------------------------------------------------

def batchnorm_fwd(x, gamma, beta, running_mean, running_var, mode,
                  momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch norm over (batch, H, W).

    Train mode normalizes with batch statistics (population variance) and
    updates the running buffers in place; eval mode uses the running stats.
    """
    if x.shape[1] != gamma.shape[0]:
        raise ValueError(f"channel mismatch: input {x.shape[1]} vs scale {gamma.shape[0]}")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, gamma, inv, mode)


def batchnorm_bwd(gout, cache):
    """Returns (gx, ggamma, gbeta); exact in both modes."""
    xhat, gamma, inv, mode = cache
    gbeta = gout.sum(axis=(0, 2, 3))
    ggamma = (gout * xhat).sum(axis=(0, 2, 3))
    gxhat = gout * gamma[None, :, None, None]
    if mode == "eval":
        gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta
    mean_g = gxhat.mean(axis=(0, 2, 3))
    mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3))
    gx = inv[None, :, None, None] * (
        gxhat - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None])
    return gx, ggamma, gbeta


# -- activations -------------------------------------------------------------

def relu_fwd(x):
    out = np.maximum(x, 0.0)
    return out, (x > 0)


def relu_bwd(gout, cache):
    return gout * cache


def sigmoid_fwd(x):
    out = sigmoid(x)
    return out, out


def sigmoid_bwd(gout, cache):
    return gout * cache * (1.0 - cache)


# -- ConvLSTM ----------------------------------------------------------------

def convlstm_fwd(x, h_prev, c_prev, w, b):
    """One ConvLSTM step; gate conv (4C out) over [x; h_prev], kernel 3.

    i, f, o are sigmoid gates and g is a tanh candidate; the cell update is
    c = f*c_prev + i*g, h = o*tanh(c).
    """
    if x.shape != h_prev.shape:
        raise ValueError(f"hidden shape {h_prev.shape} must match input {x.shape}")
    chans = x.shape[1]
    if w.shape[0] != 4 * chans or w.shape[1] != 2 * chans:
        raise ValueError(f"gate weights {w.shape} incompatible with {chans} channels")
    z = np.concatenate([x, h_prev], axis=1)
    gates, conv_cache = conv2d_fwd(z, w, b, stride=1)
    i = sigmoid(gates[:, :chans])
    f = sigmoid(gates[:, chans:2 * chans])
    o = sigmoid(gates[:, 2 * chans:3 * chans])
    g = np.tanh(gates[:, 3 * chans:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (conv_cache, i, f, o, g, c_prev, tc, chans)


def convlstm_bwd(gh, gc, cache):
    """Backward through one step. gh/gc are the upstream gradients on the
    emitted h and c; returns (gx, gh_prev, gc_prev, gw, gb)."""
    conv_cache, i, f, o, g, c_prev, tc, chans = cache
    go = gh * tc
    gc_total = gc + gh * o * (1.0 - tc * tc)
    gf = gc_total * c_prev
    gi = gc_total * g
    gg = gc_total * i
    gc_prev = gc_total * f
    dgates = np.concatenate([gi * i * (1 - i), gf * f * (1 - f),
                             go * o * (1 - o), gg * (1 - g * g)], axis=1)
    gz, gw, gb = conv2d_bwd(dgates, conv_cache)
    return gz[:, :chans], gz[:, chans:], gc_prev, gw, gb


# -- bilinear 2x upsampling ---------------------------------------------------

@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, dtype_name: str) -> np.ndarray:
    """(2n, n) bilinear interpolation matrix, align-corners-false: output i
    samples input at (i + 0.5)/2 - 0.5, clamped to the valid range."""
    n_out = 2 * n_in
    src = np.clip((np.arange(n_out) + 0.5) / 2.0 - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m.astype(np.dtype(dtype_name))


def upsample2x_fwd(x):
    """Bilinear x2 upsampling (separable matrix form)."""
    ry = _interp_matrix(x.shape[2], x.dtype.name)
    rx = _interp_matrix(x.shape[3], x.dtype.name)
    out = np.matmul(ry, np.matmul(x, rx.T))
    return out, (x.shape[2], x.shape[3], x.dtype.name)


def upsample2x_bwd(gout, cache):
    """Exact adjoint of the forward interpolation."""
    h, w, dtype_name = cache
    ry = _interp_matrix(h, dtype_name)
    rx = _interp_matrix(w, dtype_name)
    return np.matmul(ry.T, np.matmul(gout, rx))


# -- residual block -----------------------------------------------------------

def residual_fwd(x, p, mode):
    """out = ReLU(BN2(conv2(ReLU(BN1(conv1(x))))) + x).

    p maps {w1,b1,gamma1,beta1,mean1,var1,w2,b2,gamma2,beta2,mean2,var2};
    in/out channels must match for the identity path.
    """
    if p["w1"].shape[0] != x.shape[1]:
        raise ValueError("residual block needs equal in/out channels")
    a, c1 = conv2d_fwd(x, p["w1"], p["b1"])
    a, c2 = batchnorm_fwd(a, p["gamma1"], p["beta1"], p["mean1"], p["var1"], mode)
    a, c3 = relu_fwd(a)
    a, c4 = conv2d_fwd(a, p["w2"], p["b2"])
    a, c5 = batchnorm_fwd(a, p["gamma2"], p["beta2"], p["mean2"], p["var2"], mode)
    out, c6 = relu_fwd(a + x)
    return out, (c1, c2, c3, c4, c5, c6)


def residual_bwd(gout, cache):
    """Returns (gx, grads dict keyed like the forward params)."""
    c1, c2, c3, c4, c5, c6 = cache
    g = relu_bwd(gout, c6)
    gx_skip = g
    g, ggamma2, gbeta2 = batchnorm_bwd(g, c5)
    g, gw2, gb2 = conv2d_bwd(g, c4)
    g = relu_bwd(g, c3)
    g, ggamma1, gbeta1 = batchnorm_bwd(g, c2)
    g, gw1, gb1 = conv2d_bwd(g, c1)
    grads = {"w1": gw1, "b1": gb1, "gamma1": ggamma1, "beta1": gbeta1,
             "w2": gw2, "b2": gb2, "gamma2": ggamma2, "beta2": gbeta2}
    return g + gx_skip, grads

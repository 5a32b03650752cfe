"""Finite-difference verification of every backward pass.

Each named check builds a small float64 scenario, projects the operation's
output onto a fixed random vector to get a scalar, computes analytic
gradients via the backward pass, and compares against central differences
(step 1e-5). Large parameter sets are subsampled; the worst entry is
reported either way.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network, ops

FD_STEP = 1e-5
REL_FLOOR = 1e-6
ABS_GUARD = 1e-7  # both sides this small counts as agreement (e.g. bias under BN is exactly 0)


@dataclass
class GradCheckResult:
    operation: str
    max_rel_err: float
    worst: str  # "tensor[index]" of the worst entry

    def __repr__(self):
        return f"GradCheckResult({self.operation}: {self.max_rel_err:.3e} at {self.worst})"


def fd_compare(scalar_fn, tensors, analytic, step=FD_STEP,
               max_entries=None, rng=None):
    """Compare analytic gradients with central differences.

    scalar_fn() is re-evaluated with entries of `tensors` perturbed in
    place. Returns (max relative error, worst entry description).
    """
    worst_err = 0.0
    worst_desc = "(none)"
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        gflat = analytic[name].reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]

            def fd_at(h):
                flat[i] = orig + h
                fp = scalar_fn()
                flat[i] = orig - h
                fm = scalar_fn()
                flat[i] = orig
                return (fp - fm) / (2.0 * h)

            fd = fd_at(step)
            if max(abs(gflat[i]), abs(fd)) < ABS_GUARD:
                continue
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), REL_FLOOR)
            if err > worst_err:
                # Reject the measurement if the difference quotient itself is
                # unstable (a ReLU kink inside the stencil); a wrong backward
                # pass still fails because both quotients agree with each other.
                fd2 = fd_at(step / 2.0)
                if abs(fd - fd2) > 1e-3 * max(abs(fd), abs(fd2), REL_FLOOR):
                    continue
                err = abs(gflat[i] - fd2) / max(abs(gflat[i]), abs(fd2), REL_FLOOR)
                if err > worst_err:
                    worst_err = err
                    worst_desc = f"{name}[{i}]"
    return worst_err, worst_desc


def _check_conv2d(seed):
    rng = np.random.default_rng(seed)
    worst = (0.0, "")
    for stride, (c_in, c_out, k) in ((1, (3, 4, 3)), (2, (2, 3, 5))):
        x = rng.standard_normal((1, c_in, 8, 8))
        w = rng.standard_normal((c_out, c_in, k, k)) * 0.3
        b = rng.standard_normal(c_out) * 0.1
        out, cache = ops.conv2d_fwd(x, w, b, stride)
        r = rng.standard_normal(out.shape)
        gx, gw, gb = ops.conv2d_bwd(r, cache)

        def scalar():
            return float(np.sum(r * ops.conv2d_fwd(x, w, b, stride)[0]))

        err, desc = fd_compare(scalar, {"x": x, "w": w, "b": b},
                               {"x": gx, "w": gw, "b": gb})
        if err > worst[0]:
            worst = (err, f"stride{stride}:{desc}")
    return GradCheckResult("conv2d", *worst)


def _check_batchnorm(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 6))
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3) * 0.2
    mean = np.zeros(3)
    var = np.ones(3)
    out, cache = ops.batchnorm_fwd(x, gamma, beta, mean.copy(), var.copy(), "train")
    r = rng.standard_normal(out.shape)
    gx, ggamma, gbeta = ops.batchnorm_bwd(r, cache)

    def scalar():
        o, _ = ops.batchnorm_fwd(x, gamma, beta, mean.copy(), var.copy(), "train")
        return float(np.sum(r * o))

    err, desc = fd_compare(scalar, {"x": x, "gamma": gamma, "beta": beta},
                           {"x": gx, "gamma": ggamma, "beta": gbeta})
    return GradCheckResult("batchnorm", err, desc)


def _check_upsample(seed):
    rng = np.random.default_rng(seed)
    worst = (0.0, "")
    for h, w in ((4, 4), (5, 7)):
        x = rng.standard_normal((1, 2, h, w))
        out, cache = ops.upsample2x_fwd(x)
        r = rng.standard_normal(out.shape)
        gx = ops.upsample2x_bwd(r, cache)

        def scalar():
            return float(np.sum(r * ops.upsample2x_fwd(x)[0]))

        err, desc = fd_compare(scalar, {"x": x}, {"x": gx})
        if err > worst[0]:
            worst = (err, f"{h}x{w}:{desc}")
    return GradCheckResult("upsample", *worst)


def _check_convlstm(seed, steps=3):
    rng = np.random.default_rng(seed)
    c, h, w = 2, 6, 6
    xs = [rng.standard_normal((1, c, h, w)) for _ in range(steps)]
    h0 = rng.standard_normal((1, c, h, w)) * 0.5
    c0 = rng.standard_normal((1, c, h, w)) * 0.5
    wg = rng.standard_normal((4 * c, 2 * c, 3, 3)) * 0.3
    bg = rng.standard_normal(4 * c) * 0.1
    rs = [rng.standard_normal((1, c, h, w)) for _ in range(steps)]

    def run(collect=False):
        hh, cc = h0, c0
        caches, total = [], 0.0
        for t in range(steps):
            hh, cc, cache = ops.convlstm_fwd(xs[t], hh, cc, wg, bg)
            caches.append(cache)
            total += float(np.sum(rs[t] * hh))
        return (total, caches) if collect else total

    total, caches = run(collect=True)
    gw = np.zeros_like(wg)
    gb = np.zeros_like(bg)
    gxs = [None] * steps
    gh, gc = np.zeros_like(h0), np.zeros_like(c0)
    for t in range(steps - 1, -1, -1):
        gx, gh, gc, gwt, gbt = ops.convlstm_bwd(gh + rs[t], gc, caches[t])
        gw += gwt
        gb += gbt
        gxs[t] = gx
    tensors = {"w": wg, "b": bg, "h0": h0, "c0": c0, "x0": xs[0]}
    analytic = {"w": gw, "b": gb, "h0": gh, "c0": gc, "x0": gxs[0]}
    err, desc = fd_compare(run, tensors, analytic)
    return GradCheckResult("convlstm", err, desc)


def _check_residual(seed):
    rng = np.random.default_rng(seed)
    c = 3
    x = rng.standard_normal((1, c, 6, 6))
    p = {"w1": rng.standard_normal((c, c, 3, 3)) * 0.3, "b1": rng.standard_normal(c) * 0.1,
         "gamma1": rng.uniform(0.5, 1.5, c), "beta1": rng.standard_normal(c) * 0.1,
         "mean1": np.zeros(c), "var1": np.ones(c),
         "w2": rng.standard_normal((c, c, 3, 3)) * 0.3, "b2": rng.standard_normal(c) * 0.1,
         "gamma2": rng.uniform(0.5, 1.5, c), "beta2": rng.standard_normal(c) * 0.1,
         "mean2": np.zeros(c), "var2": np.ones(c)}
    out, cache = ops.residual_fwd(x, p, "train")
    r = rng.standard_normal(out.shape)
    gx, grads = ops.residual_bwd(r, cache)

    def scalar():
        return float(np.sum(r * ops.residual_fwd(x, p, "train")[0]))

    tensors = {"x": x}
    analytic = {"x": gx}
    for key in ("w1", "b1", "gamma1", "beta1", "w2", "b2", "gamma2", "beta2"):
        tensors[key] = p[key]
        analytic[key] = grads[key]
    err, desc = fd_compare(scalar, tensors, analytic)
    return GradCheckResult("residual", err, desc)


def _check_warp(seed):
    from .. import losses

    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 1.0, (7, 7))
    flow = rng.uniform(-1.5, 1.5, (7, 7, 2))
    out, cache = losses.backward_warp_fwd(img, flow)
    r = rng.standard_normal(out.shape)
    gimg = losses.backward_warp_bwd(r, cache)

    def scalar():
        return float(np.sum(r * losses.backward_warp(img, flow)))

    err, desc = fd_compare(scalar, {"image": img}, {"image": gimg})
    return GradCheckResult("warp", err, desc)


def _check_losses(seed):
    from .. import losses

    rng = np.random.default_rng(seed)
    h, w = 6, 6
    # keep |differences| well away from the L1 kink relative to the FD step
    pred = rng.uniform(0.3, 0.7, (h, w))
    target = pred + rng.choice([-1.0, 1.0], (h, w)) * rng.uniform(0.05, 0.2, (h, w))
    prev = rng.uniform(0.0, 1.0, (h, w))
    flow = rng.uniform(-1.2, 1.2, (h, w, 2))
    mask = rng.uniform(0.2, 1.0, (h, w))

    def scalar():
        l1 = losses.reconstruction_loss(pred, target, "l1")
        mse = losses.reconstruction_loss(pred, target, "mse")
        tc = losses.temporal_loss(pred, prev, flow, mask)
        return l1 + mse + 5.0 * tc

    _, g_l1 = losses.reconstruction_loss_with_grad(pred, target, "l1")
    _, g_mse = losses.reconstruction_loss_with_grad(pred, target, "mse")
    _, g_tc_k, g_tc_prev = losses.temporal_loss_with_grad(pred, prev, flow, mask)
    analytic = {"pred": g_l1 + g_mse + 5.0 * g_tc_k, "prev": 5.0 * g_tc_prev}
    err, desc = fd_compare(scalar, {"pred": pred, "prev": prev}, analytic)
    return GradCheckResult("losses", err, desc)


def _check_network(seed, steps=2, max_entries=6):
    rng = np.random.default_rng(seed)
    cfg = network.NetworkConfig(num_encoders=2, num_residual=1, base_channels=4,
                                input_bins=5, unroll_len=steps)
    weights = network.init_weights(cfg, rng, dtype=np.float64)
    xs = [rng.standard_normal((1, cfg.input_bins, 16, 16)) for _ in range(steps)]
    rs = [rng.standard_normal((1, 16, 16)) for _ in range(steps)]

    def run(collect=False):
        state, caches, total = None, [], 0.0
        for t in range(steps):
            img, state, cache = network.forward(xs[t], state, weights, cfg, "train")
            caches.append(cache)
            total += float(np.sum(rs[t] * img))
        return (total, caches) if collect else total

    total, caches = run(collect=True)
    grads: dict[str, np.ndarray] = {}
    gstate = None
    gx0 = None
    for t in range(steps - 1, -1, -1):
        gx, gstate = network.backward(rs[t], gstate, caches[t], cfg, grads)
        if t == 0:
            gx0 = gx

    tensors = {k: weights[k] for k in network.trainable_keys(weights)}
    tensors["input0"] = xs[0]
    analytic = dict(grads)
    analytic["input0"] = gx0
    err, desc = fd_compare(run, tensors, analytic, max_entries=max_entries, rng=rng)
    return GradCheckResult("network", err, desc)


GRADIENT_CHECKS = {
    "conv2d": _check_conv2d,
    "batchnorm": _check_batchnorm,
    "upsample": _check_upsample,
    "convlstm": _check_convlstm,
    "residual": _check_residual,
    "warp": _check_warp,
    "losses": _check_losses,
    "network": _check_network,
}

#: per-operation maximum relative error; the full network gets extra slack
THRESHOLDS = {name: 1e-4 for name in GRADIENT_CHECKS} | {"network": 1e-3}


def gradient_check(operation: str, seed: int = 0) -> GradCheckResult:
    """Run one named finite-difference check; see GRADIENT_CHECKS for names."""
    if operation not in GRADIENT_CHECKS:
        raise KeyError(f"unknown gradient check {operation!r}; "
                       f"choose from {sorted(GRADIENT_CHECKS)}")
    return GRADIENT_CHECKS[operation](seed)


def run_all(seeds=(0,)) -> list[GradCheckResult]:
    results = []
    for name in GRADIENT_CHECKS:
        worst = None
        for seed in seeds:
            res = gradient_check(name, seed)
            if worst is None or res.max_rel_err > worst.max_rel_err:
                worst = res
        results.append(worst)
    return results

"""Recurrent UNet for events-to-video reconstruction.

Dataflow per step, with E the input voxel tensor and + the skip join:

    xh = relu(bn(head_conv(E)))                       head, kernel 5
    h_i, c_i = convlstm(relu(bn(down_i(h_{i-1}))))    encoders, conv k5 s2 + lstm k3
    r = residual blocks (kernel 3)                    at the deepest resolution
    d_l = relu(bn(conv(up2x(d_{l-1} + h_{N-l+1}))))   decoders, kernel 5
    img = sigmoid(pred_conv(d_N + xh))                prediction, kernel 5, 1 ch

Channel width doubles after each encoder; ConvLSTM hidden size equals its
encoder's conv output. Skip joins are elementwise sum (or channel concat);
when odd input sizes make the decoder path overshoot by a pixel it is
cropped to the skip partner. State is (h, c) per encoder, zero at k=0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops

HEAD_KERNEL = 5
DOWN_KERNEL = 5
LSTM_KERNEL = 3
RES_KERNEL = 3
DEC_KERNEL = 5
PRED_KERNEL = 5


@dataclass(frozen=True)
class NetworkConfig:
    num_encoders: int = 3
    num_residual: int = 2
    base_channels: int = 32
    skip_mode: str = "sum"  # "sum" | "concat"
    input_bins: int = 5
    unroll_len: int = 40

    def __post_init__(self):
        if self.num_encoders < 1 or self.base_channels < 1 or self.input_bins < 1:
            raise ValueError("num_encoders, base_channels, input_bins must be >= 1")
        if self.num_residual < 0:
            raise ValueError("num_residual must be >= 0")
        if self.skip_mode not in ("sum", "concat"):
            raise ValueError(f"skip_mode must be 'sum' or 'concat', got {self.skip_mode!r}")

    def encoder_channels(self, i: int) -> int:
        """Output channels of encoder i (1-based); i=0 is the head."""
        return self.base_channels * 2 ** i

    def to_dict(self) -> dict:
        return {"num_encoders": self.num_encoders, "num_residual": self.num_residual,
                "base_channels": self.base_channels, "skip_mode": self.skip_mode,
                "input_bins": self.input_bins, "unroll_len": self.unroll_len}

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        return NetworkConfig(**d)

    def with_unroll(self, unroll_len: int) -> "NetworkConfig":
        return replace(self, unroll_len=unroll_len)


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(2.0) * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _xavier_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_weights(config: NetworkConfig, rng: np.random.Generator,
                 dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameter map. Convs are Kaiming-uniform (fan-in, ReLU gain),
    ConvLSTM gate convs Xavier-uniform with forget-gate bias 1."""
    p: dict[str, np.ndarray] = {}

    def conv(prefix, c_in, c_out, k, with_bn=True):
        p[f"{prefix}.w"] = _kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        p[f"{prefix}.b"] = np.zeros(c_out, dtype)
        if with_bn:
            p[f"{prefix}.bn.gamma"] = np.ones(c_out, dtype)
            p[f"{prefix}.bn.beta"] = np.zeros(c_out, dtype)
            p[f"{prefix}.bn.mean"] = np.zeros(c_out, dtype)
            p[f"{prefix}.bn.var"] = np.ones(c_out, dtype)

    nb = config.base_channels
    conv("head", config.input_bins, nb, HEAD_KERNEL)
    for i in range(1, config.num_encoders + 1):
        c_in = config.encoder_channels(i - 1)
        c_out = config.encoder_channels(i)
        conv(f"enc{i}.down", c_in, c_out, DOWN_KERNEL)
        k = LSTM_KERNEL
        p[f"enc{i}.lstm.w"] = _xavier_uniform(
            rng, (4 * c_out, 2 * c_out, k, k), 2 * c_out * k * k, 4 * c_out * k * k, dtype)
        bias = np.zeros(4 * c_out, dtype)
        bias[c_out:2 * c_out] = 1.0  # forget gate
        p[f"enc{i}.lstm.b"] = bias
    deep = config.encoder_channels(config.num_encoders)
    for j in range(1, config.num_residual + 1):
        conv(f"res{j}.conv1", deep, deep, RES_KERNEL)
        conv(f"res{j}.conv2", deep, deep, RES_KERNEL)
    mult = 2 if config.skip_mode == "concat" else 1
    for l in range(1, config.num_encoders + 1):
        c_in = config.encoder_channels(config.num_encoders - l + 1)
        c_out = config.encoder_channels(config.num_encoders - l)
        conv(f"dec{l}", c_in * mult, c_out, DEC_KERNEL)
    conv("pred", nb * mult, 1, PRED_KERNEL, with_bn=False)
    return p


def trainable_keys(weights: dict[str, np.ndarray]) -> list[str]:
    """Parameter keys updated by the optimizer (BN running stats excluded)."""
    return [k for k in weights if not (k.endswith(".bn.mean") or k.endswith(".bn.var"))]


def parameter_count(weights: dict[str, np.ndarray]) -> int:
    return sum(weights[k].size for k in trainable_keys(weights))


def zero_state(config: NetworkConfig, batch: int, height: int, width: int,
               dtype=np.float32) -> list[tuple[np.ndarray, np.ndarray]]:
    """Zero (h, c) per encoder for a given input size."""
    state = []
    h, w = height, width
    for i in range(1, config.num_encoders + 1):
        h = -(-h // 2)
        w = -(-w // 2)
        c = config.encoder_channels(i)
        state.append((np.zeros((batch, c, h, w), dtype), np.zeros((batch, c, h, w), dtype)))
    return state


def _bn_key(prefix):
    return (f"{prefix}.bn.gamma", f"{prefix}.bn.beta", f"{prefix}.bn.mean", f"{prefix}.bn.var")


def _res_params(weights, j):
    return {"w1": weights[f"res{j}.conv1.w"], "b1": weights[f"res{j}.conv1.b"],
            "gamma1": weights[f"res{j}.conv1.bn.gamma"], "beta1": weights[f"res{j}.conv1.bn.beta"],
            "mean1": weights[f"res{j}.conv1.bn.mean"], "var1": weights[f"res{j}.conv1.bn.var"],
            "w2": weights[f"res{j}.conv2.w"], "b2": weights[f"res{j}.conv2.b"],
            "gamma2": weights[f"res{j}.conv2.bn.gamma"], "beta2": weights[f"res{j}.conv2.bn.beta"],
            "mean2": weights[f"res{j}.conv2.bn.mean"], "var2": weights[f"res{j}.conv2.bn.var"]}


def _join_fwd(d, skip, mode):
    """Skip join with deterministic crop of the decoder path to its partner."""
    dh, dw = d.shape[2], d.shape[3]
    sh, sw = skip.shape[2], skip.shape[3]
    if (dh, dw) != (sh, sw):
        if dh < sh or dw < sw:
            raise ValueError(f"decoder path {d.shape} smaller than skip {skip.shape}")
        d = d[:, :, :sh, :sw]
    if mode == "sum":
        if d.shape[1] != skip.shape[1]:
            raise ValueError("sum skip join needs equal channel counts")
        out = d + skip
    else:
        out = np.concatenate([d, skip], axis=1)
    return out, ((dh, dw), skip.shape, mode)


def _join_bwd(gout, cache):
    (dh, dw), skip_shape, mode = cache
    if mode == "sum":
        gd, gskip = gout, gout
    else:
        c = gout.shape[1] - skip_shape[1]
        gd, gskip = gout[:, :c], gout[:, c:]
    if (gd.shape[2], gd.shape[3]) != (dh, dw):
        padded = np.zeros(gd.shape[:2] + (dh, dw), gd.dtype)
        padded[:, :, :gd.shape[2], :gd.shape[3]] = gd
        gd = padded
    return gd, gskip


def forward(tensor, state, weights, config: NetworkConfig, mode="eval"):
    """One reconstruction step.

    tensor: (batch, input_bins, H, W); state: list of (h, c) per encoder or
    None for the zero state. Returns (image in (0,1), new_state, cache);
    eval callers simply drop the cache.
    """
    if tensor.ndim != 4 or tensor.shape[1] != config.input_bins:
        raise ValueError(f"expected (B, {config.input_bins}, H, W) tensor, got {tensor.shape}")
    batch, _, height, width = tensor.shape
    if state is None:
        state = zero_state(config, batch, height, width, tensor.dtype)
    cache = {"steps": []}

    a, c = ops.conv2d_fwd(tensor, weights["head.w"], weights["head.b"])
    cache["head.conv"] = c
    g, b, m, v = _bn_key("head")
    a, c = ops.batchnorm_fwd(a, weights[g], weights[b], weights[m], weights[v], mode)
    cache["head.bn"] = c
    xh, c = ops.relu_fwd(a)
    cache["head.relu"] = c

    skips = [xh]
    h = xh
    new_state = []
    for i in range(1, config.num_encoders + 1):
        a, c = ops.conv2d_fwd(h, weights[f"enc{i}.down.w"], weights[f"enc{i}.down.b"], stride=2)
        cache[f"enc{i}.conv"] = c
        g, b, m, v = _bn_key(f"enc{i}.down")
        a, c = ops.batchnorm_fwd(a, weights[g], weights[b], weights[m], weights[v], mode)
        cache[f"enc{i}.bn"] = c
        a, c = ops.relu_fwd(a)
        cache[f"enc{i}.relu"] = c
        h_prev, c_prev = state[i - 1]
        h, cell, c = ops.convlstm_fwd(a, h_prev, c_prev,
                                      weights[f"enc{i}.lstm.w"], weights[f"enc{i}.lstm.b"])
        cache[f"enc{i}.lstm"] = c
        new_state.append((h, cell))
        skips.append(h)

    r = h
    for j in range(1, config.num_residual + 1):
        r, c = ops.residual_fwd(r, _res_params(weights, j), mode)
        cache[f"res{j}"] = c

    d = r
    for l in range(1, config.num_encoders + 1):
        d, c = _join_fwd(d, skips[config.num_encoders - l + 1], config.skip_mode)
        cache[f"dec{l}.join"] = c
        d, c = ops.upsample2x_fwd(d)
        cache[f"dec{l}.up"] = c
        d, c = ops.conv2d_fwd(d, weights[f"dec{l}.w"], weights[f"dec{l}.b"])
        cache[f"dec{l}.conv"] = c
        g, b, m, v = _bn_key(f"dec{l}")
        d, c = ops.batchnorm_fwd(d, weights[g], weights[b], weights[m], weights[v], mode)
        cache[f"dec{l}.bn"] = c
        d, c = ops.relu_fwd(d)
        cache[f"dec{l}.relu"] = c

    z, c = _join_fwd(d, skips[0], config.skip_mode)
    cache["pred.join"] = c
    logits, c = ops.conv2d_fwd(z, weights["pred.w"], weights["pred.b"])
    cache["pred.conv"] = c
    img, c = ops.sigmoid_fwd(logits[:, 0])
    cache["pred.sig"] = c
    return img, new_state, cache


def backward(gimg, gstate, cache, config: NetworkConfig,
             grads: dict[str, np.ndarray]):
    """Backward through one forward() step.

    gimg: gradient on the emitted image (batch, H, W); gstate: list of
    (gh, gc) flowing back from the next time step, or None. Accumulates
    parameter gradients into `grads` and returns (gtensor, gstate_prev).
    """
    n_e = config.num_encoders

    def acc(key, val):
        if key in grads:
            grads[key] += val
        else:
            grads[key] = val

    glogits = ops.sigmoid_bwd(gimg, cache["pred.sig"])[:, None]
    gz, gw, gb = ops.conv2d_bwd(glogits, cache["pred.conv"])
    acc("pred.w", gw)
    acc("pred.b", gb)
    gd, gskip0 = _join_bwd(gz, cache["pred.join"])

    gskips = [gskip0] + [None] * n_e  # index i: gradient on skips[i]
    for l in range(n_e, 0, -1):
        gd = ops.relu_bwd(gd, cache[f"dec{l}.relu"])
        gd, ggamma, gbeta = ops.batchnorm_bwd(gd, cache[f"dec{l}.bn"])
        acc(f"dec{l}.bn.gamma", ggamma)
        acc(f"dec{l}.bn.beta", gbeta)
        gd, gw, gb = ops.conv2d_bwd(gd, cache[f"dec{l}.conv"])
        acc(f"dec{l}.w", gw)
        acc(f"dec{l}.b", gb)
        gd = ops.upsample2x_bwd(gd, cache[f"dec{l}.up"])
        gd, gskip = _join_bwd(gd, cache[f"dec{l}.join"])
        gskips[n_e - l + 1] = gskip

    gr = gd
    for j in range(config.num_residual, 0, -1):
        gr, rg = ops.residual_bwd(gr, cache[f"res{j}"])
        for name, val in rg.items():  # w1, b1, gamma1, beta1, w2, ...
            stage, base = f"conv{name[-1]}", name[:-1]
            if base in ("w", "b"):
                acc(f"res{j}.{stage}.{base}", val)
            else:
                acc(f"res{j}.{stage}.bn.{base}", val)

    gh_next = gr  # gradient on h emitted by the deepest encoder, via the trunk
    gstate_prev = [None] * n_e
    for i in range(n_e, 0, -1):
        gh = gh_next + gskips[i]
        gc = np.zeros_like(gh)
        if gstate is not None:
            gh = gh + gstate[i - 1][0]
            gc = gc + gstate[i - 1][1]
        ga, gh_prev, gc_prev, gw, gb = ops.convlstm_bwd(gh, gc, cache[f"enc{i}.lstm"])
        acc(f"enc{i}.lstm.w", gw)
        acc(f"enc{i}.lstm.b", gb)
        gstate_prev[i - 1] = (gh_prev, gc_prev)
        ga = ops.relu_bwd(ga, cache[f"enc{i}.relu"])
        ga, ggamma, gbeta = ops.batchnorm_bwd(ga, cache[f"enc{i}.bn"])
        acc(f"enc{i}.down.bn.gamma", ggamma)
        acc(f"enc{i}.down.bn.beta", gbeta)
        gh_next, gw, gb = ops.conv2d_bwd(ga, cache[f"enc{i}.conv"])
        acc(f"enc{i}.down.w", gw)
        acc(f"enc{i}.down.b", gb)

    gxh = gh_next + gskips[0]
    gxh = ops.relu_bwd(gxh, cache["head.relu"])
    gxh, ggamma, gbeta = ops.batchnorm_bwd(gxh, cache["head.bn"])
    acc("head.bn.gamma", ggamma)
    acc("head.bn.beta", gbeta)
    gtensor, gw, gb = ops.conv2d_bwd(gxh, cache["head.conv"])
    acc("head.w", gw)
    acc("head.b", gb)
    return gtensor, gstate_prev

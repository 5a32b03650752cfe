"""Training procedure: dataset preparation, joint augmentation, unrolled
backpropagation through time over L reconstruction steps, validation, and
the architecture sweep.

Event tensors are precomputed per simulated sequence (fixed-count windows);
each training sample is a chunk of L consecutive windows with its ground
truth frames and composed inter-window flows, augmented jointly. State
always starts at zero per sample.
"""

from __future__ import annotations

import copy
import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses, metrics, nn
from .events import EventTensor, encode_voxel_grid, normalize_tensor, window_by_count
from .pipeline import postprocess
from .simulator import SimSequence


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2
    unroll: int = 40
    lr: float = 1e-4
    crop: int = 128
    rotation_deg: float = 20.0
    flip_prob: float = 0.5
    events_per_window: int = 2000
    lambda_tc: float = losses.DEFAULT_LAMBDA_TC
    alpha: float = losses.DEFAULT_ALPHA
    l0: int = losses.DEFAULT_L0
    reconstruction: str = "l1"
    seed: int = 0
    augment: bool = True
    disable_recurrence: bool = False

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(self.lambda_tc, self.alpha, self.l0, self.reconstruction)


TRAIN_CONFIG_KEYS = {f.name for f in TrainConfig.__dataclass_fields__.values()}


def parse_train_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a flat key=value config file; unknown keys are an error."""
    cfg = base or TrainConfig()
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value")
        if key not in TRAIN_CONFIG_KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        kind = TrainConfig.__dataclass_fields__[key].type
        if kind == "int":
            overrides[key] = int(value)
        elif kind == "float":
            overrides[key] = float(value)
        elif kind == "bool":
            overrides[key] = value.lower() in ("1", "true", "yes")
        else:
            overrides[key] = value
    return replace(cfg, **overrides)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last finite-loss weights."""

    def __init__(self, message, last_good_weights, epoch):
        super().__init__(message)
        self.last_good_weights = last_good_weights
        self.epoch = epoch


# ---------------------------------------------------------------------------
# dataset preparation
# ---------------------------------------------------------------------------

@dataclass
class SequenceData:
    """Precomputed training view of one simulated sequence."""

    tensors: np.ndarray      # (n_windows, bins, H, W) raw voxel grids
    frames: np.ndarray       # (n_windows, H, W) nearest gt frame per window
    flows: np.ndarray        # (n_windows-1, H, W, 2) composed window-to-window flow
    frame_times: np.ndarray  # (n_windows,)


def chain_flows(flow_list) -> np.ndarray:
    """Compose consecutive backward flows (each frame k+1 -> k) into the
    flow from the last frame of the chain to the first."""
    total = np.array(flow_list[-1], np.float64)
    for f in flow_list[-2::-1]:
        fx = losses.backward_warp(np.asarray(f[..., 0], np.float64), total)
        fy = losses.backward_warp(np.asarray(f[..., 1], np.float64), total)
        total += np.stack([fx, fy], axis=-1)
    return total


def prepare_sequence(seq: SimSequence, events_per_window: int, bins: int) -> SequenceData:
    """Window the events, pick the nearest gt frame per window, and compose
    the gt flows between the chosen frames."""
    windows = window_by_count(seq.events, events_per_window)
    if not windows:
        raise ValueError(f"sequence has {len(seq.events)} events, fewer than one "
                         f"window of {events_per_window}")
    h, w = seq.gt_frames.shape[1:]
    tensors = np.stack([encode_voxel_grid(win, bins, h, w).values for win in windows])
    idx = [int(np.argmin(np.abs(seq.gt_timestamps - win.t_end))) for win in windows]
    frames = seq.gt_frames[idx].astype(np.float32)
    times = seq.gt_timestamps[idx]
    flows = np.zeros((len(windows) - 1, h, w, 2), np.float32)
    for k in range(1, len(windows)):
        i, j = idx[k - 1], idx[k]
        if j > i:
            flows[k - 1] = chain_flows(seq.gt_flows[i:j])
        elif j < i:
            raise ValueError("window frame indices must be non-decreasing")
    return SequenceData(tensors, frames, flows, times)


def prepare_dataset(sequences, events_per_window: int, bins: int) -> list[SequenceData]:
    return [prepare_sequence(s, events_per_window, bins) for s in sequences]


def split_dataset(sequences, ratio: float, seed: int = 0):
    """Deterministic sequence-level split into (train, val)."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError("split ratio must be in (0, 1]")
    n = len(sequences)
    n_train = int(np.floor(n * ratio))
    if n_train == 0 or (n_train == n and ratio < 1.0):
        raise ValueError(f"cannot split {n} sequences at ratio {ratio}")
    order = np.random.default_rng(seed).permutation(n)
    train = [sequences[i] for i in sorted(order[:n_train])]
    val = [sequences[i] for i in sorted(order[n_train:])]
    return train, val


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    tensors: np.ndarray  # (L, bins, h, w)
    frames: np.ndarray   # (L, h, w)
    flows: np.ndarray    # (L-1, h, w, 2)


def _sample_zero_fill(img, sx, sy):
    """Bilinear sample with zero fill outside the image."""
    h, w = img.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros_like(sx)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            wt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            out += np.where(ok, img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)] * wt, 0.0)
    return out


def _rotate_plane(img, angle):
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = np.cos(angle), np.sin(angle)
    # inverse rotation of output coords
    sx = c * (xx - cx) + s * (yy - cy) + cx
    sy = -s * (xx - cx) + c * (yy - cy) + cy
    return _sample_zero_fill(img, sx, sy)


def _rotate_flow(flow, angle):
    fx = _rotate_plane(flow[..., 0], angle)
    fy = _rotate_plane(flow[..., 1], angle)
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([c * fx - s * fy, s * fx + c * fy], axis=-1)


def augment(sample: TrainSample, rng: np.random.Generator,
            config: TrainConfig) -> TrainSample:
    """One jointly applied transform: rotation, flips, then crop.

    Flow fields are resampled like images and their vectors rotated or
    reflected accordingly.
    """
    tensors = np.asarray(sample.tensors, np.float32)
    frames = np.asarray(sample.frames, np.float32)
    flows = np.asarray(sample.flows, np.float32)

    angle = np.deg2rad(rng.uniform(-config.rotation_deg, config.rotation_deg)) \
        if config.rotation_deg > 0 else 0.0
    hflip = rng.random() < config.flip_prob
    vflip = rng.random() < config.flip_prob

    if angle != 0.0:
        tensors = np.stack([[_rotate_plane(b, angle) for b in t] for t in tensors]
                           ).astype(np.float32)
        frames = np.stack([_rotate_plane(f, angle) for f in frames]).astype(np.float32)
        flows = np.stack([_rotate_flow(f, angle) for f in flows]).astype(np.float32) \
            if len(flows) else flows
    if hflip:
        tensors = tensors[:, :, :, ::-1]
        frames = frames[:, :, ::-1]
        flows = flows[:, :, ::-1]
        flows = np.concatenate([-flows[..., :1], flows[..., 1:]], axis=-1)
    if vflip:
        tensors = tensors[:, :, ::-1]
        frames = frames[:, ::-1]
        flows = flows[:, ::-1]
        flows = np.concatenate([flows[..., :1], -flows[..., 1:]], axis=-1)

    h, w = frames.shape[1:]
    crop = min(config.crop, h, w)
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    return TrainSample(np.ascontiguousarray(tensors[:, :, y0:y0 + crop, x0:x0 + crop]),
                       np.ascontiguousarray(frames[:, y0:y0 + crop, x0:x0 + crop]),
                       np.ascontiguousarray(flows[:, y0:y0 + crop, x0:x0 + crop]))


def make_sample(data: SequenceData, config: TrainConfig,
                rng: np.random.Generator) -> TrainSample:
    """Draw a random L-window chunk and augment it."""
    n = len(data.tensors)
    length = min(config.unroll, n)
    offset = int(rng.integers(0, n - length + 1))
    sample = TrainSample(data.tensors[offset:offset + length],
                         data.frames[offset:offset + length],
                         data.flows[offset:offset + length - 1])
    if config.augment:
        sample = augment(sample, rng, config)
    else:
        h, w = sample.frames.shape[1:]
        crop = min(config.crop, h, w)
        sample = TrainSample(sample.tensors[:, :, :crop, :crop],
                             sample.frames[:, :crop, :crop],
                             sample.flows[:, :crop, :crop])
    return sample


def _normalize_batch(tensors: np.ndarray) -> np.ndarray:
    """Per-tensor nonzero standardization, batched over samples."""
    out = np.empty_like(tensors)
    for i, t in enumerate(tensors):
        out[i] = normalize_tensor(EventTensor(t)).values
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_recon: float = float("nan")
    val_temporal: float = float("nan")
    val_ssim: float = float("nan")


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    curves: list[EpochLog]
    steps: int


def train_step(weights, net_cfg: nn.NetworkConfig, samples: list[TrainSample],
               adam: nn.Adam, loss_cfg: losses.LossConfig,
               disable_recurrence: bool = False) -> float:
    """One optimizer step on a batch: forward L steps from zero state,
    accumulate the unroll objective, backpropagate through the whole
    unroll, apply Adam. Returns the batch loss."""
    length = min(len(s.tensors) for s in samples)
    xs = [_normalize_batch(np.stack([s.tensors[t] for s in samples]))
          for t in range(length)]
    gts = [np.stack([s.frames[t] for s in samples]) for t in range(length)]
    fls = [np.stack([s.flows[t] for s in samples]) for t in range(length - 1)]

    state = None
    caches = []
    imgs = []
    recon = np.zeros(length)
    for t in range(length):
        img, state, cache = nn.forward(xs[t], None if disable_recurrence else state,
                                       weights, net_cfg, "train")
        caches.append(cache)
        imgs.append(img)
        recon[t] = losses.reconstruction_loss(img, gts[t], loss_cfg.reconstruction)

    temporal = np.zeros(length)
    gimgs = [np.zeros_like(imgs[0]) for _ in range(length)]
    for t in range(length):
        _, g = losses.reconstruction_loss_with_grad(imgs[t], gts[t], loss_cfg.reconstruction)
        gimgs[t] += g
    start = max(loss_cfg.l0, 1)
    for t in range(start, length):
        mask = losses.occlusion_mask(gts[t], gts[t - 1], fls[t - 1], loss_cfg.alpha)
        tl, gk, gkm1 = losses.temporal_loss_with_grad(imgs[t], imgs[t - 1],
                                                      fls[t - 1], mask)
        temporal[t] = tl
        gimgs[t] += loss_cfg.lambda_tc * gk
        gimgs[t - 1] += loss_cfg.lambda_tc * gkm1

    total = losses.total_loss(recon, temporal, loss_cfg)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite training loss {total}")

    grads: dict[str, np.ndarray] = {}
    gstate = None
    for t in range(length - 1, -1, -1):
        _, gstate_prev = nn.backward(gimgs[t].astype(xs[t].dtype), gstate,
                                     caches[t], net_cfg, grads)
        gstate = None if disable_recurrence else gstate_prev
    adam.step(weights, grads)
    return total


def train(weights, net_cfg: nn.NetworkConfig, train_data: list[SequenceData],
          config: TrainConfig, val_data: list[SequenceData] | None = None,
          max_steps: int | None = None, stop_fn=None) -> TrainResult:
    """Full training loop; deterministic for a fixed seed (single thread).

    One epoch draws one sample per training sequence and performs
    ceil(n_samples / batch_size) optimizer steps. Per-epoch train loss and
    validation metrics are logged. On a non-finite loss, aborts with the
    last finite-epoch weights attached to the exception.
    """
    if not train_data:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    adam = nn.Adam(lr=config.lr)
    loss_cfg = config.loss_config()
    curves = []
    last_good = copy.deepcopy(weights)
    done = False
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_data))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch = [make_sample(train_data[i], config, rng)
                     for i in order[lo:lo + config.batch_size]]
            try:
                loss = train_step(weights, net_cfg, batch, adam, loss_cfg,
                                  config.disable_recurrence)
            except (FloatingPointError, nn.NonFiniteGradient) as exc:
                raise TrainingDiverged(str(exc), last_good, epoch) from exc
            epoch_losses.append(loss)
            if max_steps is not None and adam.step_count >= max_steps:
                done = True
                break
            if stop_fn is not None and stop_fn(loss, adam.step_count):
                done = True
                break
        log = EpochLog(epoch, float(np.mean(epoch_losses)))
        if val_data:
            snap = validate(weights, net_cfg, val_data, config)
            log.val_recon = snap.recon
            log.val_temporal = snap.temporal
            log.val_ssim = snap.ssim
        curves.append(log)
        last_good = copy.deepcopy(weights)
        if done:
            break
    return TrainResult(weights, curves, adam.step_count)


@dataclass
class ValSnapshot:
    recon: float
    temporal: float
    ssim: float


def validate(weights, net_cfg: nn.NetworkConfig, val_data: list[SequenceData],
             config: TrainConfig, reset_state_each_window: bool = False) -> ValSnapshot:
    """Eval-mode pass over full sequences (no augmentation): mean
    reconstruction loss, temporal error against gt flows, and SSIM of the
    percentile-normalized frames."""
    recon_vals, temporal_vals, ssim_vals = [], [], []
    for data in val_data:
        state = None
        frames = []
        for t in range(len(data.tensors)):
            x = _normalize_batch(data.tensors[t][None])
            img, state, _ = nn.forward(x, None if reset_state_each_window else state,
                                       weights, net_cfg, "eval")
            frames.append(img[0])
            recon_vals.append(losses.reconstruction_loss(img[0], data.frames[t],
                                                         config.reconstruction))
        post = [postprocess(f) for f in frames]
        for t in range(len(post)):
            ssim_vals.append(metrics.ssim(post[t], data.frames[t]))
        if len(post) >= 2:
            temporal_vals.append(metrics.temporal_error(
                post, list(data.flows), list(data.frames), config.alpha))
    return ValSnapshot(float(np.mean(recon_vals)),
                       float(np.mean(temporal_vals)) if temporal_vals else float("nan"),
                       float(np.mean(ssim_vals)))


# ---------------------------------------------------------------------------
# architecture sweep
# ---------------------------------------------------------------------------

SWEEP_GRID = {
    "num_encoders": (2, 3, 4),
    "num_residual": (0, 1, 2),
    "skip_mode": ("sum", "concat"),
    "base_channels": (8, 16, 32, 64),
}


def enumerate_grid(grid=None) -> list[nn.NetworkConfig]:
    grid = grid or SWEEP_GRID
    keys = list(grid)
    configs = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        configs.append(nn.NetworkConfig(**dict(zip(keys, combo))))
    return configs


@dataclass
class SweepRow:
    config: nn.NetworkConfig
    val_loss: float
    inference_ms: float
    params: int


def sweep(train_data: list[SequenceData], val_data: list[SequenceData],
          config: TrainConfig, grid=None, budget_epochs: int = 2,
          recurrence: bool = False) -> list[SweepRow]:
    """Train every grid combination briefly (recurrence disabled unless
    requested) and rank by validation reconstruction loss; also times the
    mean per-tensor inference of the full network."""
    rows = []
    for net_cfg in enumerate_grid(grid):
        cfg = replace(config, epochs=budget_epochs, disable_recurrence=not recurrence,
                      lambda_tc=0.0)
        weights = nn.init_weights(net_cfg, np.random.default_rng(config.seed))
        result = train(weights, net_cfg, train_data, cfg)
        snap = validate(result.weights, net_cfg, val_data, cfg)
        x = _normalize_batch(val_data[0].tensors[0][None])
        state = None
        t0 = time.perf_counter()
        reps = 3
        for _ in range(reps):
            _, state, _ = nn.forward(x, state, result.weights, net_cfg, "eval")
        dt_ms = (time.perf_counter() - t0) / reps * 1e3
        rows.append(SweepRow(net_cfg, snap.recon, dt_ms, nn.parameter_count(weights)))
    rows.sort(key=lambda r: r.val_loss)
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    lines = ["num_encoders,num_residual,skip_mode,base_channels,val_loss,inference_ms,params"]
    for r in rows:
        c = r.config
        lines.append(f"{c.num_encoders},{c.num_residual},{c.skip_mode},"
                     f"{c.base_channels},{r.val_loss:.6f},{r.inference_ms:.3f},{r.params}")
    return "\n".join(lines) + "\n"

"""Trainer: splits, joint augmentation, BPTT bookkeeping, gradient flow,
loss decrease, determinism, and the sweep grid."""

import numpy as np
import pytest

from evrec import losses, nn, trainer
from evrec.simulator import SimConfig, Trajectory, gt_flow, procedural_texture, render_frame
from tests.conftest import DESK_NET


class _ScriptedRng:
    """Deterministic stand-in driving augment(): one uniform (rotation),
    two randoms (flips), two integers (crop origin)."""

    def __init__(self, angle_deg, hflip, vflip, crop_xy=(0, 0)):
        self.angle = angle_deg
        self.flips = [hflip, vflip]
        self.crop = list(crop_xy)

    def uniform(self, lo, hi):
        return self.angle

    def random(self):
        return 0.0 if self.flips.pop(0) else 1.0

    def integers(self, lo, hi):
        return self.crop.pop(0)


def _toy_sample(rng, length=3, size=12, bins=5):
    return trainer.TrainSample(
        rng.uniform(-1, 1, (length, bins, size, size)).astype(np.float32),
        rng.uniform(0, 1, (length, size, size)).astype(np.float32),
        rng.uniform(-1, 1, (length - 1, size, size, 2)).astype(np.float32))


# -- split ---------------------------------------------------------------------

def test_split_19_to_1():
    seqs = list(range(20))
    train, val = trainer.split_dataset(seqs, 0.95, seed=0)
    assert len(train) == 19 and len(val) == 1
    assert sorted(train + val) == seqs


def test_split_deterministic():
    seqs = list(range(12))
    a = trainer.split_dataset(seqs, 0.75, seed=3)
    b = trainer.split_dataset(seqs, 0.75, seed=3)
    assert a == b
    c = trainer.split_dataset(seqs, 0.75, seed=4)
    assert a != c


def test_split_rejects_degenerate():
    with pytest.raises(ValueError):
        trainer.split_dataset([1], 0.01)


# -- augmentation ----------------------------------------------------------------

def test_augment_identity_draw_unchanged(rng):
    sample = _toy_sample(rng)
    cfg = trainer.TrainConfig(rotation_deg=0.0, flip_prob=0.0, crop=12)
    out = trainer.augment(sample, np.random.default_rng(0), cfg)
    np.testing.assert_array_equal(out.tensors, sample.tensors)
    np.testing.assert_array_equal(out.frames, sample.frames)
    np.testing.assert_array_equal(out.flows, sample.flows)


def test_augment_horizontal_flip_negates_dx(rng):
    sample = _toy_sample(rng)
    cfg = trainer.TrainConfig(rotation_deg=0.0, flip_prob=1.0, crop=12)
    out = trainer.augment(sample, _ScriptedRng(0.0, True, False), cfg)
    np.testing.assert_array_equal(out.frames, sample.frames[:, :, ::-1])
    np.testing.assert_array_equal(out.flows[..., 0], -sample.flows[:, :, ::-1, 0])
    np.testing.assert_array_equal(out.flows[..., 1], sample.flows[:, :, ::-1, 1])


def test_augment_vertical_flip_negates_dy(rng):
    sample = _toy_sample(rng)
    cfg = trainer.TrainConfig(rotation_deg=0.0, flip_prob=1.0, crop=12)
    out = trainer.augment(sample, _ScriptedRng(0.0, False, True), cfg)
    np.testing.assert_array_equal(out.flows[..., 1], -sample.flows[:, ::-1, :, 1])


def _consistency_sample(size=48):
    """Two rendered frames with their exact flow, as a 2-step sample."""
    tex = procedural_texture(3 * size, 3 * size, np.random.default_rng(5), n_shapes=0)
    traj = Trajectory.random(1.0, np.random.default_rng(6), (size, size),
                             motion_scale=0.4)
    h0 = traj.matrix(0.0, size, size)
    h1 = traj.matrix(0.6, size, size)
    f0 = render_frame(tex, h0, size, size)
    f1 = render_frame(tex, h1, size, size)
    flow = gt_flow(h0, h1, size, size)
    frames = np.stack([f0, f1]).astype(np.float32)
    tensors = np.zeros((2, 5, size, size), np.float32)
    return trainer.TrainSample(tensors, frames, flow[None].astype(np.float32))


@pytest.mark.parametrize("hflip,vflip", [(True, False), (False, True), (True, True)])
def test_augment_flip_preserves_warp_consistency(hflip, vflip):
    sample = _consistency_sample()
    cfg = trainer.TrainConfig(rotation_deg=0.0, flip_prob=1.0, crop=48)
    out = trainer.augment(sample, _ScriptedRng(0.0, hflip, vflip), cfg)
    warped = losses.backward_warp(out.frames[0].astype(np.float64),
                                  out.flows[0].astype(np.float64))
    err = np.abs(warped - out.frames[1])[4:-4, 4:-4].max()
    assert err < 0.03


def test_augment_rotation_preserves_warp_consistency_interior():
    sample = _consistency_sample()
    cfg = trainer.TrainConfig(rotation_deg=20.0, flip_prob=1.0, crop=48)
    out = trainer.augment(sample, _ScriptedRng(14.0, False, False), cfg)
    warped = losses.backward_warp(out.frames[0].astype(np.float64),
                                  out.flows[0].astype(np.float64))
    err = np.abs(warped - out.frames[1])[10:-10, 10:-10].max()
    assert err < 0.03


def test_augment_conservation_flips_exact_rotation_within_5pct(rng):
    sample = _toy_sample(rng, length=2, size=16)
    cfg = trainer.TrainConfig(rotation_deg=0.0, flip_prob=1.0, crop=16)
    flipped = trainer.augment(sample, _ScriptedRng(0.0, True, True), cfg)
    np.testing.assert_allclose(flipped.tensors.sum(), sample.tensors.sum(), rtol=1e-6)

    # concentrate the mass away from the border so the zero-fill rotation
    # keeps it in view; the residual deviation is pure resampling error
    sample = _toy_sample(rng, length=2, size=16)
    tensors = np.zeros_like(sample.tensors)
    tensors[:, :, 4:12, 4:12] = np.abs(sample.tensors[:, :, 4:12, 4:12]) + 0.5
    sample = trainer.TrainSample(tensors, sample.frames, sample.flows)
    cfg = trainer.TrainConfig(rotation_deg=20.0, flip_prob=0.0, crop=16)
    rotated = trainer.augment(sample, _ScriptedRng(9.0, False, False), cfg)
    ratio = rotated.tensors.sum() / sample.tensors.sum()
    assert 0.95 < ratio < 1.05


# -- flow composition --------------------------------------------------------------

def test_chain_flows_matches_direct_homography_flow():
    size = 32
    traj = Trajectory.random(1.0, np.random.default_rng(2), (size, size),
                             motion_scale=0.4)
    hs = [traj.matrix(t, size, size) for t in (0.0, 0.3, 0.6)]
    step_flows = [gt_flow(hs[0], hs[1], size, size),
                  gt_flow(hs[1], hs[2], size, size)]
    direct = gt_flow(hs[0], hs[2], size, size)
    chained = trainer.chain_flows(step_flows)
    err = np.abs(chained - direct)[4:-4, 4:-4].max()
    assert err < 0.05


# -- training loop -----------------------------------------------------------------

def _tiny_net_and_config(**overrides):
    cfg = nn.NetworkConfig(num_encoders=2, num_residual=1, base_channels=4,
                           input_bins=5, unroll_len=4)
    defaults = dict(epochs=1, batch_size=2, unroll=4, lr=1e-3, crop=24,
                    events_per_window=500, seed=0, augment=False)
    defaults.update(overrides)
    return cfg, trainer.TrainConfig(**defaults)


def _fake_data(rng, n_sequences=2, n_windows=6, size=24):
    out = []
    for _ in range(n_sequences):
        out.append(trainer.SequenceData(
            rng.uniform(-1, 1, (n_windows, 5, size, size)).astype(np.float32),
            rng.uniform(0.2, 0.8, (n_windows, size, size)).astype(np.float32),
            rng.uniform(-0.5, 0.5, (n_windows - 1, size, size, 2)).astype(np.float32),
            np.linspace(0, 1, n_windows)))
    return out


def test_one_epoch_step_count_matches_batches(rng):
    net_cfg, tcfg = _tiny_net_and_config(batch_size=2)
    data = _fake_data(rng, n_sequences=2)
    weights = nn.init_weights(net_cfg, np.random.default_rng(0))
    result = trainer.train(weights, net_cfg, data, tcfg)
    assert result.steps == 1  # ceil(2/2)

    net_cfg, tcfg = _tiny_net_and_config(batch_size=2)
    data = _fake_data(rng, n_sequences=3)
    weights = nn.init_weights(net_cfg, np.random.default_rng(0))
    result = trainer.train(weights, net_cfg, data, tcfg)
    assert result.steps == 2  # ceil(3/2)


def test_gradient_reaches_every_parameter_group(rng):
    """After one step on a nonzero sample every trainable tensor gets a
    gradient entry, and all are nonzero except conv biases (which batch
    norm's mean subtraction makes exactly zero-gradient)."""
    net_cfg, tcfg = _tiny_net_and_config()
    data = _fake_data(rng, n_sequences=1)
    weights = nn.init_weights(net_cfg, np.random.default_rng(0))
    sample = trainer.make_sample(data[0], tcfg, np.random.default_rng(1))
    adam = nn.Adam(lr=tcfg.lr)

    grads: dict[str, np.ndarray] = {}
    orig_step = adam.step
    adam.step = lambda w, g: (grads.update(g), orig_step(w, g))[1]
    trainer.train_step(weights, net_cfg, [sample], adam, tcfg.loss_config())

    trainable = set(nn.trainable_keys(weights))
    assert set(grads) == trainable
    bn_fed_bias = {k for k in trainable
                   if k.endswith(".b") and f"{k[:-2]}.bn.gamma" in weights}
    for key, g in grads.items():
        if key in bn_fed_bias:
            assert np.allclose(g, 0.0, atol=1e-5), key
        else:
            assert np.any(g != 0.0), key


def test_train_deterministic_curves(rng):
    net_cfg, tcfg = _tiny_net_and_config(epochs=3)
    data = _fake_data(rng, n_sequences=2)
    r1 = trainer.train(nn.init_weights(net_cfg, np.random.default_rng(0)),
                       net_cfg, data, tcfg)
    r2 = trainer.train(nn.init_weights(net_cfg, np.random.default_rng(0)),
                       net_cfg, data, tcfg)
    assert [c.train_loss for c in r1.curves] == [c.train_loss for c in r2.curves]
    for key in r1.weights:
        np.testing.assert_array_equal(r1.weights[key], r2.weights[key])


def test_loss_decreases_on_overfit_fixture(desk_data):
    net_cfg, tcfg = _tiny_net_and_config(epochs=5, batch_size=1, unroll=4,
                                         crop=64, lr=2e-3)
    weights = nn.init_weights(net_cfg, np.random.default_rng(0))
    result = trainer.train(weights, net_cfg, [desk_data], tcfg)
    curve = [c.train_loss for c in result.curves]
    assert all(curve[i + 1] < curve[i] for i in range(len(curve) - 1)), curve


def test_nan_abort_carries_last_good_weights(rng):
    net_cfg, tcfg = _tiny_net_and_config(epochs=3)
    data = _fake_data(rng, n_sequences=1)
    data[0].tensors[2, 0, 0, 0] = np.nan  # poisoned window -> NaN loss
    weights = nn.init_weights(net_cfg, np.random.default_rng(0))
    snapshot = {k: v.copy() for k, v in weights.items()}
    with pytest.raises(trainer.TrainingDiverged) as exc_info:
        trainer.train(weights, net_cfg, data, tcfg)
    last_good = exc_info.value.last_good_weights
    assert set(last_good) == set(weights)
    for key in last_good:
        assert np.all(np.isfinite(last_good[key]))
        np.testing.assert_array_equal(last_good[key], snapshot[key])


def test_validate_deterministic(desk_data, tiny_weights):
    tcfg = trainer.TrainConfig(unroll=4, crop=64, events_per_window=1000)
    a = trainer.validate(tiny_weights, DESK_NET, [desk_data], tcfg)
    b = trainer.validate(tiny_weights, DESK_NET, [desk_data], tcfg)
    assert (a.recon, a.temporal, a.ssim) == (b.recon, b.temporal, b.ssim)
    assert np.isfinite(a.recon) and np.isfinite(a.temporal) and np.isfinite(a.ssim)


def test_state_resets_between_samples(rng):
    """Two identical samples in one batch produce identical per-step images,
    confirming zero-state starts (no cross-sample carryover)."""
    net_cfg, tcfg = _tiny_net_and_config()
    data = _fake_data(rng, n_sequences=1)
    sample = trainer.make_sample(data[0], tcfg, np.random.default_rng(1))
    weights = nn.init_weights(net_cfg, np.random.default_rng(0))
    adam = nn.Adam(lr=0.0)
    loss = trainer.train_step(weights, net_cfg, [sample, sample], adam,
                              tcfg.loss_config())
    assert np.isfinite(loss)


# -- config file ---------------------------------------------------------------------

def test_parse_train_config_overrides():
    text = "epochs=7\nlr=0.002\nreconstruction=mse\naugment=false\n# comment\n"
    cfg = trainer.parse_train_config(text)
    assert cfg.epochs == 7
    assert cfg.lr == pytest.approx(0.002)
    assert cfg.reconstruction == "mse"
    assert cfg.augment is False


def test_parse_train_config_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown config key"):
        trainer.parse_train_config("learning_rate=0.1\n")


# -- sweep ---------------------------------------------------------------------------

def test_full_grid_enumerates_72_configs():
    configs = trainer.enumerate_grid()
    assert len(configs) == 72
    assert len({(c.num_encoders, c.num_residual, c.skip_mode, c.base_channels)
                for c in configs}) == 72


def test_sweep_small_grid(rng):
    data = _fake_data(rng, n_sequences=2, n_windows=5)
    tcfg = trainer.TrainConfig(epochs=1, batch_size=1, unroll=3, crop=24,
                               events_per_window=500, seed=0, augment=False)
    grid = {"num_encoders": (2,), "num_residual": (0,),
            "skip_mode": ("sum", "concat"), "base_channels": (4,)}
    rows = trainer.sweep(data[:1], data[1:], tcfg, grid, budget_epochs=1)
    assert len(rows) == 2
    assert rows[0].val_loss <= rows[1].val_loss
    assert all(r.inference_ms > 0 and np.isfinite(r.val_loss) for r in rows)
    csv = trainer.sweep_csv(rows)
    assert csv.splitlines()[0].startswith("num_encoders,")
    assert len(csv.splitlines()) == 3


def test_larger_base_channels_never_fewer_params():
    small = nn.init_weights(nn.NetworkConfig(base_channels=8), np.random.default_rng(0))
    large = nn.init_weights(nn.NetworkConfig(base_channels=16), np.random.default_rng(0))
    assert nn.parameter_count(large) > nn.parameter_count(small)

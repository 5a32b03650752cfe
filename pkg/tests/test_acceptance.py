"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. The training-based
criteria (4-7) share session fixtures: a single-sequence overfit model and
a 3-seed temporal-loss ablation pair on a 10-sequence desk dataset.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from evrec import metrics, nn, pipeline, trainer
from evrec.cli import EXIT_OK, main
from evrec.events import (EventStream, EventWindow, encode_voxel_grid,
                          normalize_tensor, read_event_binary, window_by_count,
                          write_event_binary)
from evrec.nn import gradcheck
from evrec.simulator import (LOG_EPS, ContrastThresholds, SimConfig, Trajectory,
                             generate_events, gt_flow, procedural_texture,
                             render_frame, simulate_sequence)
from tests.test_metrics import _brute_force_ssim
from tests.test_simulator import _brute_force_events

DESK_NET = nn.NetworkConfig(num_encoders=2, num_residual=1, base_channels=4,
                            input_bins=5, unroll_len=8)
ABLATION_SEQ_SEEDS = (100, 102, 103, 104, 107, 108, 110, 111, 112, 114)
ABLATION_TRAIN_SEEDS = (0, 1, 2)


def _report(criterion, ok, detail):
    print(f"\n[criterion {criterion:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def _desk_sim(seed, motion=1.5):
    return simulate_sequence(SimConfig(width=64, height=64, duration=0.5,
                                       f_gt=50, f_sim=1000, seed=seed,
                                       motion_scale=motion))


# ---------------------------------------------------------------------------
# shared trained models
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def overfit_bundle():
    """Criterion 4 fixture: desk net overfit to one simulated sequence with
    early stopping, at most 2000 Adam steps."""
    t0 = time.time()
    seq = _desk_sim(10)
    data = trainer.prepare_sequence(seq, events_per_window=1000, bins=5)
    weights = nn.init_weights(DESK_NET, np.random.default_rng(0))
    tcfg = trainer.TrainConfig(epochs=10 ** 9, batch_size=1, unroll=8, lr=1e-3,
                               crop=64, events_per_window=1000, seed=0,
                               augment=False)
    steps = 0
    snap = None
    for chunk in range(10):  # 10 x 200 = 2000 step cap
        trainer.train(weights, DESK_NET, [data], replace(tcfg, seed=chunk),
                      max_steps=200)
        steps += 200
        snap = trainer.validate(weights, DESK_NET, [data], tcfg)
        if snap.recon < 0.09 and snap.ssim > 0.63:
            break
    return {"weights": weights, "seq": seq, "data": data, "steps": steps,
            "l1": snap.recon, "ssim": snap.ssim, "elapsed": time.time() - t0,
            "tcfg": tcfg}


@pytest.fixture(scope="session")
def ablation_bundle():
    """Criteria 5+6 fixture: 3 matched seeds x {lambda_tc=5, lambda_tc=0} on
    a 10-sequence desk dataset, plus stateful-vs-reset validation of the
    lambda_tc=5 models."""
    t0 = time.time()
    seqs = [_desk_sim(s) for s in ABLATION_SEQ_SEEDS]
    data = trainer.prepare_dataset(seqs, events_per_window=500, bins=5)
    train_data, val_data = data[:8], data[8:]
    rows = {}
    for seed in ABLATION_TRAIN_SEEDS:
        rows[seed] = {}
        for lam in (5.0, 0.0):
            tcfg = trainer.TrainConfig(epochs=10 ** 9, batch_size=2, unroll=8,
                                       lr=1e-3, crop=64, events_per_window=500,
                                       lambda_tc=lam, seed=seed, augment=False)
            weights = nn.init_weights(DESK_NET, np.random.default_rng(seed))
            trainer.train(weights, DESK_NET, train_data, tcfg, max_steps=150)
            snap = trainer.validate(weights, DESK_NET, val_data, tcfg)
            entry = {"temporal": snap.temporal, "ssim": snap.ssim}
            if lam == 5.0:
                reset = trainer.validate(weights, DESK_NET, val_data, tcfg,
                                         reset_state_each_window=True)
                entry["temporal_reset"] = reset.temporal
            rows[seed][lam] = entry
    return {"rows": rows, "elapsed": time.time() - t0}


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_criterion_01_gradient_oracle_suite():
    t0 = time.time()
    results = gradcheck.run_all(seeds=(0, 1, 2, 3, 4))
    elapsed = time.time() - t0
    worst = {r.operation: r.max_rel_err for r in results}
    ok = all(worst[op] < gradcheck.THRESHOLDS[op] for op in worst) and elapsed < 120
    detail = (", ".join(f"{op}={err:.1e}" for op, err in worst.items())
              + f"; bounds 1e-4 (net 1e-3); {elapsed:.0f}s < 120s")
    _report(1, ok, detail)


def test_criterion_02_voxel_conservation():
    rng = np.random.default_rng(7)
    t0 = time.time()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 400))
        width, height = int(rng.integers(4, 33)), int(rng.integers(4, 33))
        t = np.sort(rng.uniform(0.0, 1.0, n))
        stream = EventStream.from_arrays(width, height, t,
                                         rng.integers(0, width, n),
                                         rng.integers(0, height, n),
                                         rng.choice([-1, 1], n))
        window = EventWindow(stream, float(t[0]), float(t[-1]))
        bins = int(rng.integers(2, 8))
        grid = encode_voxel_grid(window, bins, height, width, dtype=np.float64)
        psum = float(stream.p.sum())
        rel = abs(grid.values.sum() - psum) / max(abs(psum), 1.0)
        worst = max(worst, rel)
        tstar = rng.uniform(0.0, bins - 1)
        wsum = sum(max(0.0, 1.0 - abs(b - tstar)) for b in range(bins))
        assert abs(wsum - 1.0) < 1e-12
    elapsed = time.time() - t0
    ok = worst <= 1e-9 and elapsed < 30
    _report(2, ok, f"1000 windows, worst relative defect {worst:.2e} <= 1e-9; "
                   f"{elapsed:.1f}s")


def test_criterion_03_simulator_crossing_and_warp_oracle():
    rng = np.random.default_rng(3)
    t0 = time.time()
    mismatches = 0
    for _ in range(100):
        c_pos = rng.uniform(0.05, 0.2)
        c_neg = rng.uniform(0.05, 0.2)
        n = int(rng.integers(3, 12))
        intensities = rng.uniform(0.02, 0.98, n)
        times = np.sort(rng.uniform(0.0, 1.0, n)) + np.arange(n) * 1e-6
        events = generate_events(intensities.reshape(-1, 1, 1), times,
                                 ContrastThresholds(c_pos, c_neg))
        oracle = _brute_force_events(np.log(intensities + LOG_EPS), times,
                                     c_pos, c_neg)
        same = (len(events) == len(oracle)
                and np.array_equal(events.p, [p for _, p in oracle])
                and np.allclose(events.t, [t for t, _ in oracle], atol=1e-9))
        mismatches += not same

    tex = procedural_texture(96, 96, np.random.default_rng(8), n_shapes=0)
    worst_warp = 0.0
    from evrec.losses import backward_warp
    for _ in range(100):
        traj = Trajectory.random(1.0, rng, (32, 32), motion_scale=0.35)
        ta, tb = sorted(rng.uniform(0.0, 1.0, 2))
        h0, h1 = traj.matrix(ta, 32, 32), traj.matrix(tb, 32, 32)
        flow = gt_flow(h0, h1, 32, 32)
        if np.abs(flow).max() >= 5.0:
            continue
        f0 = render_frame(tex, h0, 32, 32)
        f1 = render_frame(tex, h1, 32, 32)
        err = np.abs(backward_warp(f0, flow) - f1)[4:-4, 4:-4].max()
        worst_warp = max(worst_warp, err)
    elapsed = time.time() - t0
    ok = mismatches == 0 and worst_warp < 0.02 and elapsed < 60
    _report(3, ok, f"100 signals exact ({mismatches} mismatches), warp error "
                   f"{worst_warp:.4f} < 0.02; {elapsed:.0f}s < 60s")


def test_criterion_04_overfit_fixture(overfit_bundle):
    b = overfit_bundle
    ok = (b["l1"] < 0.1 and b["ssim"] > 0.6 and b["steps"] <= 2000
          and b["elapsed"] < 600)
    _report(4, ok, f"L1={b['l1']:.4f} < 0.1, SSIM={b['ssim']:.4f} > 0.6 after "
                   f"{b['steps']} steps ({b['elapsed']:.0f}s < 600s)")


def test_criterion_05_temporal_loss_ablation(ablation_bundle):
    rows = ablation_bundle["rows"]
    ratios = [rows[s][5.0]["temporal"] / rows[s][0.0]["temporal"]
              for s in ABLATION_TRAIN_SEEDS]
    ok = (all(r <= 1.05 for r in ratios) and float(np.median(ratios)) < 1.0
          and ablation_bundle["elapsed"] < 3600)
    _report(5, ok, "temporal-error ratios (lambda=5 / lambda=0) "
                   + ", ".join(f"{r:.3f}" for r in ratios)
                   + f"; all <= 1.05, median {np.median(ratios):.3f} < 1; "
                   f"{ablation_bundle['elapsed']:.0f}s < 3600s")


def test_criterion_06_recurrence_ablation(ablation_bundle):
    rows = ablation_bundle["rows"]
    stateful = [rows[s][5.0]["temporal"] for s in ABLATION_TRAIN_SEEDS]
    reset = [rows[s][5.0]["temporal_reset"] for s in ABLATION_TRAIN_SEEDS]
    ok = float(np.median(reset)) >= float(np.median(stateful))
    _report(6, ok, "reset-every-window temporal "
                   + ", ".join(f"{r:.4f}" for r in reset)
                   + f" (median {np.median(reset):.4f}) >= stateful "
                   + ", ".join(f"{s:.4f}" for s in stateful)
                   + f" (median {np.median(stateful):.4f})")


def test_criterion_07_window_duration_robustness(overfit_bundle):
    b = overfit_bundle
    seq = b["seq"]
    n = 1000
    durations = [seq.events.t[(k + 1) * n - 1] - seq.events.t[k * n]
                 for k in range(len(seq.events) // n)]
    tau = float(np.mean(durations))

    def mean_ssim(duration_s):
        rec = pipeline.Reconstructor(b["weights"], DESK_NET,
                                     pipeline.WindowPolicy("duration",
                                                           duration_s=duration_s))
        frames = pipeline.reconstruct_stream(seq.events, rec)
        vals = [metrics.ssim(f.pixels, seq.gt_frames[
            int(np.argmin(np.abs(seq.gt_timestamps - f.timestamp)))])
            for f in frames]
        return float(np.mean(vals))

    at_tau = mean_ssim(tau)
    at_tenth = mean_ssim(tau / 10.0)
    rel_loss = (at_tau - at_tenth) / at_tau
    ok = rel_loss < 0.40
    _report(7, ok, f"SSIM {at_tau:.3f} at tau={tau * 1e3:.1f}ms vs {at_tenth:.3f} "
                   f"at tau/10; relative loss {rel_loss:.2f} < 0.40")


def test_criterion_08_hfr_equivalence_and_ordering():
    rng = np.random.default_rng(5)
    weights = nn.init_weights(DESK_NET, np.random.default_rng(1))
    n = 25000
    t = np.sort(rng.uniform(0.0, 1.0, n)) + np.arange(n) * 1e-10
    stream = EventStream.from_arrays(32, 32, t, rng.integers(0, 32, n),
                                     rng.integers(0, 32, n),
                                     rng.choice([-1, 1], n))
    plain = pipeline.reconstruct_stream(
        stream, pipeline.Reconstructor(weights, DESK_NET,
                                       pipeline.WindowPolicy("count", count=10000)))
    same = pipeline.hfr_synthesize(stream, weights, DESK_NET, 10000, 10000)
    bitwise = (len(plain) == len(same)
               and all(a.timestamp == b.timestamp
                       and np.array_equal(a.pixels, b.pixels)
                       for a, b in zip(plain, same)))

    merged = pipeline.hfr_synthesize(stream, weights, DESK_NET, 10000, 500)
    offsets = 10000 // 500
    expected = sum((n - j * 500) // 10000 for j in range(offsets))
    ts = [f.timestamp for f in merged]
    ordered = all(ts[i] <= ts[i + 1] for i in range(len(ts) - 1))
    ok = bitwise and offsets == 20 and len(merged) == expected and ordered
    _report(8, ok, f"shift=count bitwise equal: {bitwise}; N=10000 D=500 -> "
                   f"{offsets} offsets, {len(merged)} frames merged, "
                   f"non-decreasing: {ordered}")


def test_criterion_09_percentile_postprocess():
    img = np.linspace(0.15, 0.75, 120 * 120).reshape(120, 120)
    out = pipeline.postprocess(img)
    lo, hi = np.percentile(img, 1.0), np.percentile(img, 99.0)
    oracle = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    interior = np.abs(out - oracle).max()
    const = pipeline.postprocess(np.full((32, 32), 0.42))
    ok = (out.min() == 0.0 and out.max() == 1.0 and interior < 0.02
          and np.all(const == 0.5))
    _report(9, ok, f"ramp spans [{out.min()}, {out.max()}], oracle deviation "
                   f"{interior:.2e} < 0.02; constant -> 0.5: {np.all(const == 0.5)}")


def test_criterion_10_metric_sanity():
    rng = np.random.default_rng(11)
    a = rng.uniform(0, 1, (16, 16))
    exact = metrics.ssim(a, a) == 1.0 and metrics.mse(a, a) == 0.0
    worst = 0.0
    for _ in range(10):
        x = rng.uniform(0, 1, (16, 16))
        y = rng.uniform(0, 1, (16, 16))
        worst = max(worst, abs(metrics.ssim(x, y) - _brute_force_ssim(x, y)))
    ok = exact and worst < 1e-9
    _report(10, ok, f"ssim(a,a)=1 and mse(a,a)=0 exactly: {exact}; brute-force "
                    f"SSIM deviation {worst:.1e} < 1e-9")


def test_criterion_11_throughput_benchmark(tmp_path, capsys):
    rng = np.random.default_rng(2)
    n = 100000
    t = np.sort(rng.uniform(0.0, 1.0, n))
    stream = EventStream.from_arrays(180, 180, t, rng.integers(0, 180, n),
                                     rng.integers(0, 180, n),
                                     rng.choice([-1, 1], n))
    blob = write_event_binary(stream)
    t0 = time.perf_counter()
    parsed = read_event_binary(blob)
    windows = window_by_count(parsed, 10000)
    for win in windows:
        normalize_tensor(encode_voxel_grid(win, 5, 180, 180))
    rate = n / (time.perf_counter() - t0)

    out = tmp_path / "bench.txt"
    code = main(["bench", "--count", "10000", "--size", "180", "--repeats", "3",
                 "--out", str(out), "--num-encoders", "2", "--num-residual",
                 "1", "--base-channels", "4"])
    text = out.read_text()
    staged = all(s in text for s in ("parse:", "voxelize+normalize:", "forward:",
                                     "postprocess:", "total:"))
    ok = code == EXIT_OK and staged and rate >= 1e6
    _report(11, ok, f"parse+voxelize {rate:,.0f} events/s >= 1e6; per-stage "
                    f"report present: {staged}")

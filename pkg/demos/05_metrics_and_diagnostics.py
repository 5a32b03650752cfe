#!/usr/bin/env python3
"""Evaluation protocol and network diagnostics.

Scores reconstructions with local histogram equalization + MSE/SSIM plus
the flow-warp temporal error, then probes the network's memory by feeding
empty tensors and watching the reconstruction decay.
"""

import importlib
import sys
from pathlib import Path

import numpy as np

from evrec import metrics, pipeline
from evrec.nn import gradcheck, load_checkpoint
from evrec.simulator import SimConfig, simulate_sequence

CHECKPOINT = Path(__file__).parent / "output" / "02_model" / "checkpoint.e2v"


def main():
    if not CHECKPOINT.exists():
        print("no checkpoint yet; training one first\n")
        importlib.import_module("02_train_desk_model").main()
    weights, net, _ = load_checkpoint(CHECKPOINT.read_bytes())

    seq = simulate_sequence(SimConfig(width=64, height=64, duration=0.5, f_gt=50,
                                      f_sim=1000, seed=15, motion_scale=1.5))
    rec = pipeline.Reconstructor(weights, net,
                                 pipeline.WindowPolicy("duration", duration_s=0.02))
    frames = pipeline.reconstruct_stream(seq.events, rec)

    # The paper-style protocol: equalize both sides, then compare.
    rows = []
    for frame in frames:
        j = int(np.argmin(np.abs(seq.gt_timestamps - frame.timestamp)))
        a = metrics.local_hist_eq(frame.pixels)
        b = metrics.local_hist_eq(seq.gt_frames[j])
        rows.append((metrics.mse(a, b), metrics.ssim(a, b)))
    mse_vals, ssim_vals = zip(*rows)
    print(f"equalized MSE  {np.mean(mse_vals):.4f}")
    print(f"equalized SSIM {np.mean(ssim_vals):.4f}")
    raw = [f.pixels for f in frames]
    gts = [seq.gt_frames[int(np.argmin(np.abs(seq.gt_timestamps - f.timestamp)))]
           for f in frames]
    k = min(len(raw), len(seq.gt_flows) + 1)
    print(f"temporal error {metrics.temporal_error(raw[:k], list(seq.gt_flows[:k-1]), gts[:k]):.4f}")

    # Memory probe: warm up on real windows, then feed empty tensors. The
    # per-step change shows how quickly the learned state forgets.
    deltas = pipeline.decay_diagnostic(weights, net, seq.events, empty_steps=6,
                                       policy=pipeline.WindowPolicy("count", count=1000))
    print("\ndecay per empty step:", " ".join(f"{d:.4f}" for d in deltas))

    # And the backward passes stay honest against finite differences.
    print("\ngradient checks:")
    for res in gradcheck.run_all(seeds=(0,)):
        print(f"  {res.operation:<10} {res.max_rel_err:.2e}")


if __name__ == "__main__":
    sys.path.insert(0, str(Path(__file__).parent))
    main()

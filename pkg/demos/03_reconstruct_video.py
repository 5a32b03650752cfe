#!/usr/bin/env python3
"""Reconstruct video from an event stream with a trained checkpoint.

Runs the stateful window-by-window reconstruction (encode, normalize,
recurrent forward, percentile post-processing) with both windowing modes
and scores the result against the simulator's ground truth.
"""

import importlib
from pathlib import Path

import numpy as np

from evrec import metrics, pipeline
from evrec.nn import load_checkpoint
from evrec.simulator import SimConfig, simulate_sequence

OUT = Path(__file__).parent / "output" / "03_frames"
CHECKPOINT = Path(__file__).parent / "output" / "02_model" / "checkpoint.e2v"


def main():
    if not CHECKPOINT.exists():
        print("no checkpoint yet; training one first\n")
        importlib.import_module("02_train_desk_model").main()
    weights, net, _ = load_checkpoint(CHECKPOINT.read_bytes())

    # A fresh sequence the model never saw.
    seq = simulate_sequence(SimConfig(width=64, height=64, duration=0.5, f_gt=50,
                                      f_sim=1000, seed=15, motion_scale=1.5))
    print(f"reconstructing {len(seq.events)} events")

    for name, policy in (("count", pipeline.WindowPolicy("count", count=1000)),
                         ("duration", pipeline.WindowPolicy("duration",
                                                            duration_s=0.02))):
        rec = pipeline.Reconstructor(weights, net, policy)
        frames = pipeline.reconstruct_stream(seq.events, rec)
        scores = []
        for frame in frames:
            j = int(np.argmin(np.abs(seq.gt_timestamps - frame.timestamp)))
            scores.append(metrics.ssim(frame.pixels, seq.gt_frames[j]))
        print(f"{name:>9} windows: {len(frames)} frames, "
              f"mean SSIM vs gt {np.mean(scores):.3f}")
        pipeline.write_frames(frames, OUT / name)

    print(f"\nframes written under {OUT}")


if __name__ == "__main__":
    import sys

    sys.path.insert(0, str(Path(__file__).parent))
    main()

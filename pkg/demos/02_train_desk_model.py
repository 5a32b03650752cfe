#!/usr/bin/env python3
"""Train a small reconstruction network on simulated sequences.

Uses the desk-scale recurrent UNet (2 encoders, 4 base channels) with the
full objective: per-step reconstruction loss plus the flow-warp temporal
consistency term, backpropagated through an 8-step unroll.
"""

from pathlib import Path

import numpy as np

from evrec import nn, trainer
from evrec.simulator import SimConfig, simulate_sequence

OUT = Path(__file__).parent / "output" / "02_model"
NET = nn.NetworkConfig(num_encoders=2, num_residual=1, base_channels=4,
                       input_bins=5, unroll_len=8)


def main(steps=300):
    sequences = [simulate_sequence(SimConfig(width=64, height=64, duration=0.5,
                                             f_gt=50, f_sim=1000, seed=seed,
                                             motion_scale=1.5))
                 for seed in (10, 12, 13)]
    data = trainer.prepare_dataset(sequences, events_per_window=1000, bins=5)
    print(f"{len(data)} sequences, {[len(d.tensors) for d in data]} windows each")

    config = trainer.TrainConfig(epochs=10 ** 9, batch_size=2, unroll=8, lr=1e-3,
                                 crop=64, events_per_window=1000, seed=0,
                                 augment=False)
    weights = nn.init_weights(NET, np.random.default_rng(config.seed))
    result = trainer.train(weights, NET, data[:-1], config, val_data=data[-1:],
                           max_steps=steps)

    print(f"\n{'epoch':>5} {'train':>8} {'val L1':>8} {'val SSIM':>8}")
    for log in result.curves[:: max(len(result.curves) // 10, 1)]:
        print(f"{log.epoch:5d} {log.train_loss:8.4f} {log.val_recon:8.4f} "
              f"{log.val_ssim:8.4f}")

    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "checkpoint.e2v").write_bytes(nn.save_checkpoint(result.weights, NET))
    print(f"\ncheckpoint written to {OUT / 'checkpoint.e2v'}")
    return OUT / "checkpoint.e2v"


if __name__ == "__main__":
    main()

"""Command-line surface: simulate, train, reconstruct, eval, sweep, bench,
gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every run writes its resolved configuration to a run manifest (key=value)
next to its output. `--threads 1` pins the BLAS pool for bitwise
reproducibility.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_manifest(path: Path, args: argparse.Namespace, extra: dict | None = None):
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    entries.update(extra or {})
    with open(path, "w") as f:
        for key, value in entries.items():
            f.write(f"{key}={value}\n")


def _network_config(args):
    from . import nn

    return nn.NetworkConfig(num_encoders=args.num_encoders,
                            num_residual=args.num_residual,
                            base_channels=args.base_channels,
                            skip_mode=args.skip_mode,
                            input_bins=args.bins,
                            unroll_len=getattr(args, "unroll", 40))


def _add_network_flags(p, base_channels=32, num_encoders=3, num_residual=2):
    p.add_argument("--num-encoders", type=int, default=num_encoders)
    p.add_argument("--num-residual", type=int, default=num_residual)
    p.add_argument("--base-channels", type=int, default=base_channels)
    p.add_argument("--skip-mode", choices=("sum", "concat"), default="sum")
    p.add_argument("--bins", type=int, default=5)


def _load_events(path: Path):
    from .events import parse_event_text, read_event_binary

    data = path.read_bytes()
    if data[:4] == b"EVB1":
        return read_event_binary(data)
    return parse_event_text(data)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .simulator import SimConfig, simulate_sequence, write_dataset

    if args.size < 2:
        raise UsageError(f"--size must be at least 2, got {args.size}")
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    sequences = []
    for i in range(args.count):
        cfg = SimConfig(width=args.size, height=args.size, duration=args.duration,
                        f_gt=args.f_gt, f_sim=args.f_sim, seed=args.seed + i,
                        texture_path=args.texture, motion_scale=args.motion_scale)
        sequences.append(simulate_sequence(cfg))
        print(f"sequence {i}: {len(sequences[-1].events)} events")
    out = Path(args.out)
    write_dataset(sequences, out)
    _write_manifest(out / "run_manifest.txt", args)
    print(f"wrote {args.count} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import nn, trainer
    from .nn import load_checkpoint, save_checkpoint
    from .simulator import read_dataset

    tcfg = trainer.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                               unroll=args.unroll, lr=args.lr, crop=args.crop,
                               events_per_window=args.events_per_window,
                               lambda_tc=args.lambda_tc, alpha=args.alpha,
                               l0=args.l0, reconstruction=args.recon,
                               seed=args.seed, augment=not args.no_augment,
                               disable_recurrence=args.disable_recurrence)
    if args.config:
        tcfg = trainer.parse_train_config(Path(args.config).read_text(), tcfg)
    net_cfg = _network_config(args)

    sequences = read_dataset(args.dataset)
    if args.val_ratio < 1.0 and len(sequences) > 1:
        train_seqs, val_seqs = trainer.split_dataset(sequences, args.val_ratio, tcfg.seed)
    else:
        train_seqs, val_seqs = sequences, []
    train_data = trainer.prepare_dataset(train_seqs, tcfg.events_per_window,
                                         net_cfg.input_bins)
    val_data = trainer.prepare_dataset(val_seqs, tcfg.events_per_window,
                                       net_cfg.input_bins) if val_seqs else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves_path = out / "curves.csv"
    epoch_offset = 0
    if args.resume:
        weights, net_cfg, _ = load_checkpoint(Path(args.resume).read_bytes())
        if curves_path.exists():
            epoch_offset = max(len(curves_path.read_text().splitlines()) - 1, 0)
    else:
        weights = nn.init_weights(net_cfg, np.random.default_rng(tcfg.seed))

    _write_manifest(out / "run_manifest.txt", args, {"resolved_train_config": tcfg})
    try:
        result = trainer.train(weights, net_cfg, train_data, tcfg, val_data,
                               max_steps=args.max_steps)
    except trainer.TrainingDiverged as exc:
        (out / "checkpoint.e2v").write_bytes(
            save_checkpoint(exc.last_good_weights, net_cfg))
        print(f"training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    (out / "checkpoint.e2v").write_bytes(save_checkpoint(result.weights, net_cfg))
    mode = "a" if epoch_offset else "w"
    with open(curves_path, mode) as f:
        if not epoch_offset:
            f.write("epoch,train_loss,val_recon,val_temporal,val_ssim\n")
        for log in result.curves:
            f.write(f"{log.epoch + epoch_offset},{log.train_loss:.6f},"
                    f"{log.val_recon:.6f},{log.val_temporal:.6f},{log.val_ssim:.6f}\n")
    print(f"trained {result.steps} steps; final loss "
          f"{result.curves[-1].train_loss:.4f}; checkpoint at {out / 'checkpoint.e2v'}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from . import pipeline
    from .nn import load_checkpoint

    weights, net_cfg, _ = load_checkpoint(Path(args.checkpoint).read_bytes())
    stream = _load_events(Path(args.events))
    if args.window_duration_ms is not None:
        policy = pipeline.WindowPolicy("duration",
                                       duration_s=args.window_duration_ms / 1e3,
                                       skip_empty=args.skip_empty)
    else:
        policy = pipeline.WindowPolicy("count", count=args.window_count)
        dropped = len(stream) % args.window_count
        if dropped:
            print(f"dropping {dropped} trailing events (partial window)")

    if args.color:
        if policy.kind != "count":
            raise UsageError("--color currently requires count windowing")
        frames = pipeline.color_reconstruct(stream, weights, net_cfg,
                                            pattern=args.cfa_pattern,
                                            count=policy.count)
    elif args.hfr_shift is not None:
        if policy.kind != "count":
            raise UsageError("--hfr-shift requires count windowing")
        if not 1 <= args.hfr_shift <= policy.count or policy.count % args.hfr_shift:
            raise UsageError(f"--hfr-shift {args.hfr_shift} must divide "
                             f"--window-count {policy.count}")
        frames = pipeline.hfr_synthesize(stream, weights, net_cfg,
                                         policy.count, args.hfr_shift)
    else:
        rec = pipeline.Reconstructor(weights, net_cfg, policy)
        frames = pipeline.reconstruct_stream(stream, rec)

    if args.deflicker > 0:
        frames = pipeline.deflicker(frames, args.deflicker)
    out = Path(args.out)
    pipeline.write_frames(frames, out)
    _write_manifest(out / "run_manifest.txt", args)
    print(f"wrote {len(frames)} frames to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import metrics
    from .pipeline import read_frames
    from .simulator import read_sequence

    frames = read_frames(args.frames)
    gt_dir = Path(args.gt)
    if (gt_dir / "meta.txt").exists():
        seq = read_sequence(gt_dir)
        gt_frames = list(seq.gt_frames)
        gt_times = seq.gt_timestamps
        gt_flows = list(seq.gt_flows)
    else:
        gt = read_frames(gt_dir)
        gt_frames = [f.pixels for f in gt]
        gt_times = np.array([f.timestamp for f in gt])
        gt_flows = None

    lo = gt_times[0] + args.skip_head_s
    hi = gt_times[-1] - args.skip_tail_s
    keep = [i for i, t in enumerate(gt_times) if lo <= t <= hi]
    frame_times = np.array([f.timestamp for f in frames])
    pairs, skipped = metrics.match_nearest(frame_times, gt_times[keep],
                                           args.tolerance_ms / 1e3)
    if not pairs:
        print("no reconstructed/ground-truth pairs within tolerance", file=sys.stderr)
        return EXIT_DATA

    eq_rec, eq_gt, gt_idx = [], [], []
    for i, j in pairs:
        eq_rec.append(metrics.local_hist_eq(frames[i].pixels))
        eq_gt.append(metrics.local_hist_eq(gt_frames[keep[j]]))
        gt_idx.append(keep[j])
    mse_val = float(np.mean([metrics.mse(a, b) for a, b in zip(eq_rec, eq_gt)]))
    ssim_val = float(np.mean([metrics.ssim(a, b) for a, b in zip(eq_rec, eq_gt)]))
    if gt_flows is not None and len(pairs) >= 2 and gt_idx == list(
            range(gt_idx[0], gt_idx[0] + len(gt_idx))):
        flows = gt_flows[gt_idx[0]:gt_idx[-1]]
        temporal = metrics.temporal_error(eq_rec, flows,
                                          [gt_frames[i] for i in gt_idx])
    else:
        temporal = float("nan")

    report = metrics.EvalReport([metrics.EvalRow(Path(args.frames).name, mse_val,
                                                 ssim_val, temporal,
                                                 len(pairs), skipped)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    _write_manifest(out.with_suffix(".manifest.txt"), args)
    print(report.to_text())
    return EXIT_OK


def cmd_sweep(args) -> int:
    from . import trainer
    from .simulator import read_dataset

    grid = dict(trainer.SWEEP_GRID)
    for key, flag in (("num_encoders", args.encoders), ("num_residual", args.residuals),
                      ("base_channels", args.channels), ("skip_mode", args.skips)):
        if flag:
            cast = str if key == "skip_mode" else int
            grid[key] = tuple(cast(v) for v in flag.split(","))

    sequences = read_dataset(args.dataset)
    if len(sequences) < 2:
        raise UsageError("sweep needs at least 2 sequences (train + val)")
    train_seqs, val_seqs = sequences[:-1], sequences[-1:]
    tcfg = trainer.TrainConfig(epochs=args.budget_epochs, batch_size=2,
                               unroll=args.unroll, crop=args.crop,
                               events_per_window=args.events_per_window,
                               seed=args.seed, augment=False)
    bins = 5
    train_data = trainer.prepare_dataset(train_seqs, tcfg.events_per_window, bins)
    val_data = trainer.prepare_dataset(val_seqs, tcfg.events_per_window, bins)
    rows = trainer.sweep(train_data, val_data, tcfg, grid,
                         budget_epochs=args.budget_epochs,
                         recurrence=args.enable_recurrence)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(trainer.sweep_csv(rows))
    _write_manifest(out.with_suffix(".manifest.txt"), args)
    print(f"swept {len(rows)} configurations -> {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import nn, pipeline
    from .events import (EventStream, encode_voxel_grid, normalize_tensor,
                         read_event_binary, window_by_count, write_event_binary)
    from .nn import load_checkpoint

    if args.checkpoint:
        weights, net_cfg, _ = load_checkpoint(Path(args.checkpoint).read_bytes())
    else:
        net_cfg = _network_config(args)
        weights = nn.init_weights(net_cfg, np.random.default_rng(args.seed))

    if args.events:
        raw = Path(args.events).read_bytes()
        stream = _load_events(Path(args.events))
        if len(stream) < args.count:
            raise UsageError(f"need at least {args.count} events, got {len(stream)}")
    else:
        rng = np.random.default_rng(args.seed)
        n = args.count * max(args.repeats, 1)
        t = np.sort(rng.uniform(0.0, 1.0, n))
        stream = EventStream.from_arrays(
            args.size, args.size, t,
            rng.integers(0, args.size, n), rng.integers(0, args.size, n),
            rng.choice([-1, 1], n).astype(np.int8))
        raw = write_event_binary(stream)

    reps = max(args.repeats, 1)
    t0 = time.perf_counter()
    for _ in range(reps):
        parsed = read_event_binary(raw)
    parse_ms = (time.perf_counter() - t0) / reps * 1e3

    windows = window_by_count(parsed, args.count)[:reps]
    bins, h, w = net_cfg.input_bins, parsed.height, parsed.width
    t0 = time.perf_counter()
    tensors = [normalize_tensor(encode_voxel_grid(win, bins, h, w)) for win in windows]
    voxel_ms = (time.perf_counter() - t0) / len(windows) * 1e3

    state = None
    imgs = []
    t0 = time.perf_counter()
    for tensor in tensors:
        img, state, _ = nn.forward(tensor.values[None].astype(np.float32),
                                   state, weights, net_cfg, "eval")
        imgs.append(img[0])
    forward_ms = (time.perf_counter() - t0) / len(tensors) * 1e3

    t0 = time.perf_counter()
    for img in imgs:
        pipeline.postprocess(img)
    post_ms = (time.perf_counter() - t0) / len(imgs) * 1e3

    # parse time covers the whole file; charge each window its share
    parse_per_window_ms = parse_ms / max(len(parsed) // args.count, 1)
    total = parse_per_window_ms + voxel_ms + forward_ms + post_ms
    ev_per_s = args.count / ((parse_per_window_ms + voxel_ms) / 1e3)
    lines = [f"events per window:    {args.count}",
             f"sensor:               {w}x{h}",
             f"parse:                {parse_per_window_ms:9.3f} ms",
             f"voxelize+normalize:   {voxel_ms:9.3f} ms",
             f"forward:              {forward_ms:9.3f} ms",
             f"postprocess:          {post_ms:9.3f} ms",
             f"total:                {total:9.3f} ms",
             f"parse+voxelize rate:  {ev_per_s:,.0f} events/s"]
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        _write_manifest(out.with_suffix(".manifest.txt"), args)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .nn import gradcheck

    seeds = tuple(range(args.seed, args.seed + args.seeds))
    failed = False
    lines = []
    for res in gradcheck.run_all(seeds):
        bound = gradcheck.THRESHOLDS[res.operation]
        ok = res.max_rel_err < bound
        failed |= not ok
        lines.append(f"{'PASS' if ok else 'FAIL'}  {res.operation:<10} "
                     f"max rel err {res.max_rel_err:.3e} (bound {bound:.0e}) "
                     f"at {res.worst}")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(lines) + "\n")
        _write_manifest(out.with_suffix(".manifest.txt"), args)
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="evrec",
                     description="Event-camera video reconstruction toolkit")
    parser.add_argument("--threads", type=int, default=None,
                        help="limit BLAS threads (1 = bitwise reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a simulated event dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--duration", type=float, default=0.5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--f-gt", type=float, default=50.0)
    p.add_argument("--f-sim", type=float, default=1000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture", default=None, help="PGM/PPM texture (default procedural)")
    p.add_argument("--motion-scale", type=float, default=1.0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the reconstruction network")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value training config file")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--unroll", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--crop", type=int, default=128)
    p.add_argument("--events-per-window", type=int, default=2000)
    p.add_argument("--lambda-tc", type=float, default=5.0)
    p.add_argument("--alpha", type=float, default=50.0)
    p.add_argument("--l0", type=int, default=2)
    p.add_argument("--recon", choices=("l1", "mse"), default="l1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-ratio", type=float, default=0.95)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--disable-recurrence", action="store_true")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_network_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct frames from events")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-count", type=int, default=2000)
    p.add_argument("--window-duration-ms", type=float, default=None)
    p.add_argument("--skip-empty", action="store_true",
                   help="skip empty duration windows instead of feeding zeros")
    p.add_argument("--hfr-shift", type=int, default=None,
                   help="temporal shift D for high-framerate synthesis")
    p.add_argument("--deflicker", type=float, default=0.0)
    p.add_argument("--color", action="store_true")
    p.add_argument("--cfa-pattern", default="RGGB")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="score reconstructions against ground truth")
    p.add_argument("--frames", required=True)
    p.add_argument("--gt", required=True, help="simulator sequence dir or frames dir")
    p.add_argument("--out", default="report.csv")
    p.add_argument("--tolerance-ms", type=float, default=1.0)
    p.add_argument("--skip-head-s", type=float, default=0.0)
    p.add_argument("--skip-tail-s", type=float, default=0.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="architecture grid search")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--budget-epochs", type=int, default=2)
    p.add_argument("--unroll", type=int, default=8)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--events-per-window", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--enable-recurrence", action="store_true")
    p.add_argument("--encoders", default=None, help="comma list, e.g. 2,3")
    p.add_argument("--residuals", default=None)
    p.add_argument("--channels", default=None)
    p.add_argument("--skips", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="per-stage timing of one reconstruction window")
    p.add_argument("--events", default=None, help="event file (default: synthetic)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--size", type=int, default=180)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_network_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    from .events import EventFormatError
    from .nn import CheckpointError, NonFiniteGradient

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    limit = None
    if args.threads is not None:
        import threadpoolctl

        limit = threadpoolctl.threadpool_limits(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EventFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteGradient as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        if limit is not None:
            limit.unregister()


if __name__ == "__main__":
    sys.exit(main())

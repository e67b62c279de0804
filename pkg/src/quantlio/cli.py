"""Command-line experiment runner."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .pipeline import (
    MODES, RunConfig, config_from_descriptor, parse_sweep_expr, run,
    sweep, write_sweep_csv,
)
from .quantizer import Codebook


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantlio",
        description="Run the quantized LiDAR-inertial odometry pipeline on a "
                    "synthetic scene and report trajectory and bandwidth metrics.")
    parser.add_argument("--config", help="key-value config file")
    parser.add_argument("--mode", choices=MODES)
    parser.add_argument("--transport", help="'inproc' or 'socket:PORT'")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory for CSV reports")
    parser.add_argument("--scene", help="scene preset")
    parser.add_argument("--trajectory", help="trajectory preset")
    parser.add_argument("--duration", type=float)
    parser.add_argument("--lp", type=int, help="point bits per axis")
    parser.add_argument("--ln", type=int, help="residual-vector bits per axis")
    parser.add_argument("--lz", type=int, help="scalar residual bits")
    parser.add_argument("--ds0", type=float, help="preprocessing voxel size (m)")
    parser.add_argument("--alpha", type=float, help="distance penalty coefficient")
    parser.add_argument("--sigma", type=float, help="measurement noise std (m)")
    parser.add_argument("--sweep", help="e.g. 'lp=3..12,ln=3,lz=2'")
    return parser


def _assemble_config(args) -> RunConfig:
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.transport:
        overrides["transport"] = args.transport
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    if args.scene:
        overrides["scene"] = args.scene
    if args.trajectory:
        overrides["trajectory"] = args.trajectory
    if args.duration is not None:
        overrides["duration"] = args.duration
    if args.ds0 is not None:
        overrides["ds_0"] = args.ds0
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if args.sigma is not None:
        overrides["sigma"] = args.sigma

    if args.config:
        cfg = config_from_descriptor(args.config, **overrides)
    else:
        cfg = RunConfig(**overrides)

    cb_over = {}
    if args.lp is not None:
        cb_over["l_p"] = args.lp
    if args.ln is not None:
        cb_over["l_n"] = args.ln
    if args.lz is not None:
        cb_over["l_z"] = args.lz
    if cb_over:
        cfg = replace(cfg, codebook=replace(cfg.codebook, **cb_over))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _assemble_config(args)
        if args.sweep:
            ranges = parse_sweep_expr(args.sweep)
            for field in ("lp", "ln", "lz"):
                for v in ranges[field]:
                    Codebook(**{f"l_{field[1]}": v})  # validate early
            rows = sweep(cfg, ranges["lp"], ranges["ln"], ranges["lz"])
            out_dir = cfg.out_dir or "."
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, "sweep.csv")
            write_sweep_csv(rows, path)
            print(f"sweep: {len(rows)} configurations -> {path}")
            return 0
        metrics, _ = run(cfg)
        print(f"mode={cfg.mode} scans={metrics.scans} "
              f"ate={metrics.ate_trans:.4f} m / {metrics.ate_rot:.4f} rad "
              f"bits/meas={metrics.bits_per_meas_sent:.2f} "
              f"(per associated: {metrics.bits_per_meas_assoc:.2f}) "
              f"diverged={metrics.diverged}")
        if cfg.out_dir:
            print(f"reports written to {cfg.out_dir}")
        return 0
    except (ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

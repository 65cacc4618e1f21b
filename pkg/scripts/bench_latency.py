"""Time sample generation in compressed-code space against raw pixels.

Runs the same denoiser architecture and schedule length on both
representations, on this machine, and prints per-sample wall times plus
the speedup. Numbers are hardware-specific; the stable claim is the
direction (the compressed route is faster at equal step count).

Usage:
    python3 scripts/bench_latency.py
    python3 scripts/bench_latency.py --batch 128 --steps 10 --repeats 3
"""

from __future__ import annotations

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import torch

from layerlens.pipeline import latency_report


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--steps", type=int, default=2,
                        help="diffusion steps for both routes")
    parser.add_argument("--pixel-size", type=int, default=128)
    parser.add_argument("--latent-size", type=int, default=16)
    parser.add_argument("--repeats", type=int, default=1,
                        help="keep the fastest of this many runs")
    parser.add_argument("--threads", type=int, default=0,
                        help="torch thread cap (0 leaves it alone)")
    args = parser.parse_args()
    if args.threads > 0:
        torch.set_num_threads(args.threads)

    best = None
    for _ in range(max(args.repeats, 1)):
        rep = latency_report(batch=args.batch, t_steps=args.steps,
                             pixel_size=args.pixel_size,
                             latent_size=args.latent_size)
        if best is None or (rep["latent_s_per_sample"]
                            < best["latent_s_per_sample"]):
            best = rep
    best["speedup"] = best["pixel_s_per_sample"] / best["latent_s_per_sample"]
    print(json.dumps(best, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

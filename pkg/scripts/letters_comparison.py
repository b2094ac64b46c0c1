#!/usr/bin/env python3
"""Train RSDS and the Euclidean baseline on each synthetic letter and tabulate the metrics.

    python3 scripts/letters_comparison.py results/letters --epochs 500 --letters S W P
"""
import argparse
import json
from pathlib import Path

from rsds.cli import main as rsds_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--letters", nargs="+", default=["S", "W", "P"])
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--sweep-n", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)
    out = Path(args.out)
    rows = []
    for letter in args.letters:
        code = rsds_main(["--threads", "1", "compare", "--letter", letter, str(out / letter),
                          "--epochs", str(args.epochs), "--sweep-n", str(args.sweep_n), "--seed", str(args.seed)])
        if code:
            return code
        for rep in json.loads((out / letter / "compare.json").read_text()):
            rows.append((letter, rep["model"], rep["success_rate"], rep["velocity_mse"], rep["dtwd_mean"], rep["max_manifold_deviation"]))
    print(f"\n{'letter':6s} {'model':10s} {'success':>8s} {'mse':>10s} {'dtwd':>10s} {'off-manifold':>13s}")
    for letter, model, sr, mse, dt, dev in rows:
        print(f"{letter:6s} {model:10s} {sr:8.3f} {mse:10.4g} {dt:10.4g} {dev:13.3g}")
    return 0


if __name__ == "__main__":
    raise SystemExit(run())

"""Benchmark 1, problems ID1-ID10, 5% noise, population 100 for 10 generations.

    python scripts/bench1_subset.py [--checkpoint runs/desk/model.gvae] [--runs 1]
"""
import argparse
import sys
from pathlib import Path

from grammar_ode.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", default=str(ROOT / "runs" / "desk" / "model.gvae"))
    ap.add_argument("--out", default=str(ROOT / "runs" / "bench1_subset"))
    ap.add_argument("--oracle", action="store_true", help="score the true ODE from smoothed data instead")
    args = ap.parse_args()
    argv = ["bench", "-v", "--config", str(ROOT / "configs" / "bench1_subset.yaml"), "--out", args.out]
    argv += ["--oracle"] if args.oracle else ["--checkpoint", args.checkpoint]
    code = main(argv)
    print((Path(args.out) / "scoreboard.csv").read_text())
    sys.exit(code)

"""Forced pendulum 2u'' + u' + 5u = 2 sin(0.5 t) from noisy acceleration.

Trains the benchmark-3 GVAE first when the checkpoint is missing.

    python scripts/pendulum.py [--runs 5]
"""
import argparse
import time
from pathlib import Path

from grammar_ode.cli import main
from grammar_ode.config import load_config
from grammar_ode.search import DiscoveryResult

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "pendulum.yaml"

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--out", default=str(ROOT / "runs" / "pendulum"))
    args = ap.parse_args()
    ck = ROOT / load_config(CONFIG).bench.checkpoint
    if not ck.exists():
        main(["train", "-v", "--config", str(CONFIG), "--out", str(ck.parent)])
    for seed in range(args.runs):
        out = Path(args.out) / f"seed{seed}"
        t0 = time.perf_counter()
        main(["discover", "pendulum", "--config", str(CONFIG), "--checkpoint", str(ck), "--seed", str(seed),
              "--out", str(out)])
        best = DiscoveryResult.from_json((out / "result.json").read_text()).best
        print(f"seed {seed} ({time.perf_counter() - t0:.0f} s): {best.expression if best else '-'}")

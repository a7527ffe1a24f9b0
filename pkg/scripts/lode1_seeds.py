"""Noiseless LODE1 discovery over several seeds with the desk model.

    python scripts/lode1_seeds.py [--seeds 5] [--checkpoint runs/desk/model.gvae]
"""
import argparse
import time
from pathlib import Path

from grammar_ode.cli import main
from grammar_ode.harness import score_candidate
from grammar_ode.search import DiscoveryResult
from grammar_ode.trajectories import get_benchmark, solve_ground_truth

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--checkpoint", default=str(ROOT / "runs" / "desk" / "model.gvae"))
    ap.add_argument("--out", default=str(ROOT / "runs" / "lode1"))
    args = ap.parse_args()
    p = get_benchmark("LODE1")
    truth = solve_ground_truth(p)
    for seed in range(args.seeds):
        out = Path(args.out) / f"seed{seed}"
        t0 = time.perf_counter()
        main(["discover", "LODE1", "--config", str(ROOT / "configs" / "lode1.yaml"), "--checkpoint",
              args.checkpoint, "--seed", str(seed), "--noise", "0", "--out", str(out)])
        res = DiscoveryResult.from_json((out / "result.json").read_text())
        s = score_candidate(res.best, p, truth)
        print(f"seed {seed}: rel L2(u) {s.l2_u:.4g} in {time.perf_counter() - t0:.0f} s  "
              f"{res.best.expression if res.best else '-'}")

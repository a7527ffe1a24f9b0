"""Command-line entry points: gen, train, discover, bench, eval.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config

log = logging.getLogger("grammar_ode")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class CliError(RuntimeError):
    def __init__(self, msg: str, code: int = EXIT_RUNTIME):
        super().__init__(msg)
        self.code = code


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "code_version": __version__}


def _set_threads(n: int) -> None:
    import torch

    torch.set_num_threads(max(1, n))


def _grammar(cfg: RunConfig, name: str | None = None):
    from .grammar import GrammarError, load_grammar_file

    try:
        return load_grammar_file(name or cfg.grammar.name, cfg.grammar.n_max if name is None else None)
    except (GrammarError, FileNotFoundError, KeyError) as exc:
        raise CliError(f"grammar: {exc}", EXIT_CONFIG) from exc


def _model_grammar(cfg: RunConfig):
    """Grammar the GVAE sees: the re-parse grammar when one is configured."""
    return _grammar(cfg, cfg.data.gvae_grammar) if cfg.data.gvae_grammar else _grammar(cfg)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------- gen


def build_dataset(cfg: RunConfig):
    """Sample skeletons; optionally re-parse under a second grammar. Returns (grammar, sequences, stats)."""
    from .grammar import NotInLanguageError, SequenceLengthError, parse, sample_dataset

    g = _grammar(cfg)
    strings = sample_dataset(g, cfg.data.size, cfg.data.seed) if cfg.data.size > 0 else []
    target = _grammar(cfg, cfg.data.gvae_grammar) if cfg.data.gvae_grammar else g
    seqs, kept, dropped = [], [], 0
    for s in strings:
        try:
            seqs.append(parse(target, s))
            kept.append(s)
        except (NotInLanguageError, SequenceLengthError):
            dropped += 1
    stats = {"sampled": len(strings), "kept": len(kept), "dropped": dropped,
             "drop_rate": dropped / len(strings) if strings else 0.0,
             "grammar_hash": target.hash, "n_max": target.n_max, "n_rules": target.n_rules}
    return target, kept, seqs, stats


def cmd_gen(cfg: RunConfig, args) -> int:
    from .gvae import split_indices

    out = _out(cfg)
    g, strings, seqs, stats = build_dataset(cfg)
    if not strings:
        log.warning("dataset is empty")
    tr, va = split_indices(len(strings), cfg.data.val_fraction, cfg.data.seed)
    (out / "train.txt").write_text("".join(strings[i] + "\n" for i in tr))
    (out / "val.txt").write_text("".join(strings[i] + "\n" for i in va))
    (out / "grammar.cfg").write_text(g.to_text())
    _write_json(out / "dataset.json", {**stats, **_stamp(cfg), "train": len(tr), "val": len(va)})
    if stats["dropped"]:
        log.info("dropped %d of %d strings (%.1f%%) under the second grammar",
                 stats["dropped"], stats["sampled"], 100 * stats["drop_rate"])
    print(f"wrote {len(tr)} train / {len(va)} val skeletons to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------- train


def _load_split(path: Path, g):
    from .grammar import parse

    meta = json.loads((path / "dataset.json").read_text())
    if meta["grammar_hash"] != g.hash:
        raise CliError("dataset was generated for a different grammar", EXIT_CONFIG)
    read = lambda name: [parse(g, s) for s in (path / name).read_text().splitlines() if s.strip()]
    return read("train.txt"), read("val.txt")


def cmd_train(cfg: RunConfig, args) -> int:
    from .gvae import GvaeModel, reconstruction_accuracy, train

    out = _out(cfg)
    if args.data:
        g = _model_grammar(cfg)
        tr, va = _load_split(Path(args.data), g)
        seqs = tr + va
        tcfg = replace(cfg.train, val_fraction=len(va) / max(1, len(seqs)))
    else:
        g, _, seqs, _ = build_dataset(cfg)
        tcfg = cfg.train
    init, start = None, 0
    if args.resume:
        try:
            init = GvaeModel.load(args.resume, g)
        except ValueError as exc:
            raise CliError(f"resume: {exc}", EXIT_CONFIG) from exc
        prev = Path(args.resume).with_suffix(".csv")
        if prev.exists():
            rows = list(csv.DictReader(prev.open()))
            start = int(rows[-1]["epoch"]) if rows else 0
    t0 = time.monotonic()
    res = train(g, seqs, cfg.model, tcfg, log_path=out / "model.csv", init=init, start_epoch=start,
                progress=lambda r: log.info("epoch %d total %.4f val %.4f exact %.3f lr %.2e",
                                            r["epoch"], r["total"], r["val_total"], r["val_exact"], r["lr"]))
    res.model.save(out / "model.gvae", g)
    val = [seqs[i] for i in res.val_idx]
    report = {**_stamp(cfg), "training_hash": cfg.training_hash(), "epochs": len(res.log), "best_epoch": res.best_epoch,
              "stopped_early": res.stopped_early, "train_seconds": time.monotonic() - t0,
              "val_size": len(val), "val_reconstruction": reconstruction_accuracy(res.model, g, val)}
    _write_json(out / "train_report.json", report)
    print(f"held-out exact reconstruction {report['val_reconstruction']:.3f} ({len(val)} sequences)")
    return EXIT_OK


# ---------------------------------------------------------------------------- discover


def _problem(name: str):
    from .trajectories import get_benchmark

    try:
        return get_benchmark(name)
    except KeyError as exc:
        raise CliError(exc.args[0], EXIT_CONFIG) from exc


def _model(cfg: RunConfig, g, path: str | None):
    from .gvae import GvaeModel

    path = path or cfg.bench.checkpoint
    if not path:
        raise CliError("no GVAE checkpoint given (--checkpoint or bench.checkpoint)", EXIT_CONFIG)
    try:
        return GvaeModel.load(path, g)
    except (OSError, ValueError) as exc:
        raise CliError(f"checkpoint {path}: {exc}", EXIT_CONFIG) from exc


def _latent_frame(cfg: RunConfig, model):
    """(center, scale) of the encoded training skeletons, or None for the prior frame."""
    from .gvae import latent_statistics

    if cfg.search.latent_init != "data":
        return None
    key = cfg.hash()
    cached = getattr(model, "latent_frame", None)
    if cached is None or cached[0] != key:
        g, _, seqs, _ = build_dataset(cfg)
        model.latent_frame = (key, latent_statistics(model, g, seqs))
    return model.latent_frame[1]


def run_discovery(cfg: RunConfig, p, model, g, seed: int, noise: float, order: int | None):
    from .harness import observations, problem_spec
    from .search import discover
    from .smoother import SmootherConfig
    from .trajectories import solve_ground_truth

    truth = solve_ground_truth(p)
    obs = observations(p, noise, seed, truth)
    spec = problem_spec(p, cfg.bench.closure, order or cfg.bench.order)
    scfg = replace(cfg.smoother, seed=seed)
    if p.suite == 3:
        scfg = replace(scfg, force_period=p.force_period, initial_conditions=tuple(p.initial_values))
    result = discover(model, g, obs, spec, replace(cfg.search, seed=seed), scfg,
                      latent_frame=_latent_frame(cfg, model))
    return truth, result


def _render_top(result, k: int = 5) -> str:
    lines = []
    for i, c in enumerate(result.candidates[:k], 1):
        sol = "-" if c.l_sol is None else f"{c.l_sol:.4g}"
        lines.append(f"{i:2d}. {c.expression} = 0   L_DE={c.l_de:.4g} L_SOL={sol} C={c.complexity}")
    return "\n".join(lines) if lines else "(every candidate was penalized)"


def cmd_discover(cfg: RunConfig, args) -> int:
    from .harness import observations, problem_spec
    from .search import discover
    from .trajectories import Trajectory

    out = _out(cfg)
    g = _model_grammar(cfg)
    model = _model(cfg, g, args.checkpoint)
    noise = cfg.bench.noise if args.noise is None else args.noise
    if args.data:
        from .search import ProblemSpec

        obs = Trajectory.from_csv(args.data)
        spec = ProblemSpec(closure=cfg.bench.closure or "implicit", order=args.order or cfg.bench.order)
        result = discover(model, g, obs, spec, cfg.search, cfg.smoother, latent_frame=_latent_frame(cfg, model))
        truth, p = None, None
    else:
        if not args.problem:
            raise CliError("give a benchmark id or --data", EXIT_CONFIG)
        p = _problem(args.problem)
        truth, result = run_discovery(cfg, p, model, g, cfg.seed, noise, args.order)
    result.meta.update(_stamp(cfg))
    result.meta["problem"] = args.problem
    (out / "result.json").write_text(result.to_json() + "\n")
    result.write_log_csv(out / "run_log.csv")
    _write_json(out / "timing.json", {**_stamp(cfg), "wall_time": result.wall_time})
    print(_render_top(result))
    if p is not None and result.best is not None:
        from .harness import score_candidate

        s = score_candidate(result.best, p, truth)
        print(f"top-1 relative L2: u {s.l2_u:.4g}  du {s.l2_du:.4g}")
    return EXIT_OK


# ---------------------------------------------------------------------------- bench / eval


def _suite_problems(cfg: RunConfig, suite: int | None):
    from .trajectories import load_benchmarks

    suite = suite or cfg.bench.suite
    probs = load_benchmarks(suite) if suite else []
    if cfg.bench.problems:
        names = set(cfg.bench.problems)
        probs = [p for p in (probs or load_benchmarks()) if p.name in names]
    if not probs:
        raise CliError("empty benchmark selection", EXIT_CONFIG)
    return probs


def cmd_bench(cfg: RunConfig, args) -> int:
    from .harness import observations, oracle_score, score_candidate
    from .smoother import smooth

    out = _out(cfg)
    probs = _suite_problems(cfg, args.suite)
    noise = cfg.bench.noise if args.noise is None else args.noise
    rows = []
    g = model = None
    if not args.oracle:
        g = _model_grammar(cfg)
        model = _model(cfg, g, args.checkpoint)
    for p in probs:
        for run in range(cfg.bench.runs):
            seed = cfg.seed + run
            if args.oracle:
                from .trajectories import solve_ground_truth

                truth = solve_ground_truth(p)
                obs = observations(p, noise, seed, truth)
                scfg = replace(cfg.smoother, seed=seed)
                if p.suite == 3:
                    scfg = replace(scfg, force_period=p.force_period, initial_conditions=tuple(p.initial_values))
                s, expr = oracle_score(p, smooth(obs, scfg), truth), p.operator
            else:
                truth, result = run_discovery(cfg, p, model, g, seed, noise, args.order)
                s, expr = score_candidate(result.best, p, truth), (result.best.expression if result.best else None)
            f = s.floored()
            rows.append({"problem": p.name, "run": run, "seed": seed, "l2_u": f.l2_u, "l2_du": f.l2_du,
                         "l2_ddu": f.l2_ddu, "rel_complexity": s.rel_complexity, "equation": expr})
            log.info("%s run %d: u %.4g du %.4g", p.name, run, f.l2_u, f.l2_du)
    _write_scoreboard(out / "scoreboard.csv", rows, cfg)
    mean_u = float(np.mean([r["l2_u"] for r in rows]))
    print(f"{len(probs)} problems x {cfg.bench.runs} runs: mean relative L2(u) {mean_u:.4f}")
    return EXIT_OK


def _best_per_problem(rows: list[dict]) -> list[dict]:
    best = {}
    for r in rows:
        if r["problem"] not in best or r["l2_u"] < best[r["problem"]]["l2_u"]:
            best[r["problem"]] = r
    return list(best.values())


def _write_scoreboard(path: Path, rows: list[dict], cfg: RunConfig) -> None:
    fields = ["problem", "run", "seed", "l2_u", "l2_du", "l2_ddu", "rel_complexity", "equation"]
    with path.open("w", newline="") as fh:
        fh.write("# " + json.dumps(_stamp(cfg), sort_keys=True) + "\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)

        def mean(rs, k):
            vals = [r[k] for r in rs if r[k] is not None]
            return float(np.mean(vals)) if vals else None

        for label, rs in (("MEAN(all runs)", rows), ("MEAN(best run)", _best_per_problem(rows))):
            w.writerow({"problem": label, **{k: mean(rs, k) for k in ("l2_u", "l2_du", "l2_ddu", "rel_complexity")}})


def cmd_eval(cfg: RunConfig, args) -> int:
    from .harness import score_candidate
    from .search import DiscoveryResult

    if not args.result or not args.problem:
        raise CliError("eval needs --result and a benchmark id", EXIT_CONFIG)
    p = _problem(args.problem)
    result = DiscoveryResult.from_json(Path(args.result).read_text())
    rows = []
    for rank, c in enumerate(result.candidates[: args.top], 1):
        s = score_candidate(c, p)
        rows.append({"rank": rank, "expression": c.expression, **asdict(s.floored())})
        print(f"{rank:2d}. u {s.l2_u:.4g} du {s.l2_du:.4g}  {c.expression}")
    _write_json(_out(cfg) / "eval.json", {**_stamp(cfg), "problem": p.name, "rows": rows})
    return EXIT_OK


# ---------------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grammar-ode", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="sample and split a skeleton dataset")
    p = sub.add_parser("train", parents=[common], help="train a GVAE")
    p.add_argument("--data", help="directory written by 'gen' (default: sample on the fly)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("discover", parents=[common], help="search for the ODE behind one data set")
    p.add_argument("problem", nargs="?", help="benchmark id, e.g. LODE1")
    p.add_argument("--data", help="CSV trajectory instead of a benchmark")
    p.add_argument("--checkpoint")
    p.add_argument("--order", type=int, choices=(1, 2))
    p.add_argument("--noise", type=float)
    p = sub.add_parser("bench", parents=[common], help="run a benchmark suite and write a scoreboard")
    p.add_argument("--suite", type=int, choices=(1, 2, 3))
    p.add_argument("--checkpoint")
    p.add_argument("--order", type=int, choices=(1, 2))
    p.add_argument("--noise", type=float)
    p.add_argument("--oracle", action="store_true", help="score the true ODE instead of searching")
    p = sub.add_parser("eval", parents=[common], help="score a saved result against ground truth")
    p.add_argument("problem", nargs="?")
    p.add_argument("--result")
    p.add_argument("--top", type=int, default=5)
    return ap


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "discover": cmd_discover, "bench": cmd_bench, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    overrides = {k: v for k, v in (("seed", args.seed), ("threads", args.threads), ("out", args.out))
                 if v is not None}
    try:
        cfg = load_config(args.config, overrides)
        _set_threads(cfg.threads)
        out = _out(cfg)
        (out / "config.yaml").write_text(dump_config(cfg))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

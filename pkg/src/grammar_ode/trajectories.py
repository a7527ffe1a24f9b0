"""Benchmark problems, sampled trajectories, noise and error metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from typing import Iterable

import numpy as np

from .symodes import OdeExpr, evaluate, interpret

PROVENANCES = ("exact-analytic", "numeric-solve", "smoothed", "noisy-observation")


@dataclass(frozen=True)
class Trajectory:
    t: np.ndarray
    u: np.ndarray | None = None
    du: np.ndarray | None = None
    ddu: np.ndarray | None = None
    provenance: str = "numeric-solve"
    noise_level: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        object.__setattr__(self, "t", t)
        if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be a strictly increasing 1-D array")
        for name in ("u", "du", "ddu"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != t.shape:
                    raise ValueError(f"channel {name} has shape {v.shape}, grid has {t.shape}")
                object.__setattr__(self, name, v)
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def n_s(self) -> int:
        return self.t.size

    def channels(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("u", "du", "ddu") if getattr(self, k) is not None}

    def to_csv(self, path) -> None:
        cols = ["t"] + list(self.channels())
        with open(path, "w", newline="") as fh:
            fh.write(f"# provenance={self.provenance} noise_level={self.noise_level!r}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            data = [self.t] + list(self.channels().values())
            for row in zip(*data):
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        meta = {"provenance": "noisy-observation", "noise_level": 0.0}
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        if lines and lines[0].startswith("#"):
            for kv in lines[0][1:].split():
                k, v = kv.split("=", 1)
                meta[k] = v
            lines = lines[1:]
        rows = list(csv.reader(lines))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        cols = {name: body[:, i] for i, name in enumerate(header)}
        return cls(t=cols["t"], u=cols.get("u"), du=cols.get("du"), ddu=cols.get("ddu"),
                   provenance=meta["provenance"], noise_level=float(meta["noise_level"]))


@dataclass(frozen=True)
class BenchmarkProblem:
    name: str
    suite: int
    operator: str
    domain: tuple[float, float]
    initial_values: tuple[float, ...]
    fs: float
    force: str | None = None
    closed_form: str | None = None
    force_period: float | None = None
    provisional: bool = False
    note: str | None = None

    def __post_init__(self):
        if len(self.initial_values) != self.order:
            raise ValueError(f"{self.name}: {len(self.initial_values)} initial values for order {self.order}")

    @cached_property
    def operator_expr(self) -> OdeExpr:
        return interpret(self.operator)

    @cached_property
    def force_expr(self) -> OdeExpr | None:
        return interpret(self.force) if self.force else None

    @cached_property
    def residual_expr(self) -> OdeExpr:
        """Full ``D(u) - F(t)``."""
        return interpret(self.operator if not self.force else f"{self.operator} - ({self.force})")

    @property
    def order(self) -> int:
        return interpret(self.operator).order

    @property
    def t_grid(self) -> np.ndarray:
        t0, t1 = self.domain
        n = int(math.floor((t1 - t0) * self.fs + 1e-9)) + 1
        return t0 + np.arange(n) / self.fs

    def force_fn(self):
        if self.force_expr is None:
            return None
        fe = self.force_expr
        return lambda t: evaluate(fe, t) if np.ndim(t) else float(evaluate(fe, np.array([t]))[0])

    def force_series(self, t=None) -> np.ndarray | None:
        if self.force_expr is None:
            return None
        return evaluate(self.force_expr, self.t_grid if t is None else np.asarray(t))

    def to_dict(self) -> dict:
        return {
            "name": self.name, "suite": self.suite, "operator": self.operator, "force": self.force,
            "domain": list(self.domain), "initial_values": list(self.initial_values), "fs": self.fs,
            "closed_form": self.closed_form, "force_period": self.force_period,
            "provisional": self.provisional, "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkProblem":
        return cls(
            name=d["name"], suite=int(d["suite"]), operator=d["operator"], domain=tuple(d["domain"]),
            initial_values=tuple(d["initial_values"]), fs=d["fs"], force=d.get("force"),
            closed_form=d.get("closed_form"), force_period=d.get("force_period"),
            provisional=bool(d.get("provisional", False)), note=d.get("note"),
        )


def load_benchmarks(suite: int | Iterable[int] | None = None) -> list[BenchmarkProblem]:
    raw = json.loads(resources.files("grammar_ode.data").joinpath("benchmarks.json").read_text())
    probs = [BenchmarkProblem.from_dict(d) for d in raw["problems"]]
    if suite is None:
        return probs
    suites = {suite} if isinstance(suite, int) else set(suite)
    return [p for p in probs if p.suite in suites]


def get_benchmark(name: str) -> BenchmarkProblem:
    probs = {p.name: p for p in load_benchmarks()}
    try:
        return probs[name]
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; valid ids: {', '.join(probs)}") from None


def _closed_form(expr: str, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    import sympy as sp

    ts = sp.Symbol("t")
    u = sp.sympify(expr.replace("^", "**"), locals={"t": ts})
    fns = [sp.lambdify(ts, e, "numpy") for e in (u, sp.diff(u, ts), sp.diff(u, ts, 2))]
    return tuple(np.broadcast_to(np.asarray(f(t), dtype=float), t.shape).copy() for f in fns)


def solve_ground_truth(p: BenchmarkProblem, prefer_closed_form: bool = True,
                       rtol: float = 1e-11, atol: float = 1e-12) -> Trajectory:
    t = p.t_grid
    if p.closed_form and prefer_closed_form:
        u, du, ddu = _closed_form(p.closed_form, t)
        return Trajectory(t=t, u=u, du=du, ddu=ddu, provenance="exact-analytic")
    from .odesolver import IvpSpec, solve_ivp

    spec = IvpSpec(residual=p.operator_expr, initial_state=p.initial_values, t_grid=t,
                   force=p.force_fn(), rtol=rtol, atol=atol, blow_up=1e8, max_steps=1_000_000)
    return solve_ivp(spec)


def add_noise(traj: Trajectory, level: float, seed: int, channels: Iterable[str] | None = None) -> Trajectory:
    """Additive Gaussian noise with sigma = level * RMS(channel), per channel."""
    if level < 0:
        raise ValueError("noise level must be non-negative")
    if level == 0:
        return traj
    rng = np.random.default_rng(seed)
    names = list(channels) if channels is not None else list(traj.channels())
    updates = {}
    for name in ("u", "du", "ddu"):
        v = getattr(traj, name)
        if v is None or name not in names:
            continue
        sigma = level * float(np.sqrt(np.mean(v ** 2)))
        updates[name] = v + rng.normal(0.0, sigma, size=v.shape)
    return replace(traj, provenance="noisy-observation", noise_level=level, **updates)


def observe(traj: Trajectory, channels: Iterable[str]) -> Trajectory:
    """Keep only the named channels."""
    keep = set(channels)
    return replace(traj, **{k: (getattr(traj, k) if k in keep else None) for k in ("u", "du", "ddu")})


def relative_l2(truth, pred) -> float:
    truth, pred = np.asarray(truth, dtype=float), np.asarray(pred, dtype=float)
    denom = float(np.linalg.norm(truth))
    diff = float(np.linalg.norm(truth - pred))
    if denom == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / denom


def floor_error(x: float, cap: float = 1.0) -> float:
    """Aggregation rule: errors above ``cap`` (or non-finite) count as ``cap``."""
    return cap if not math.isfinite(x) or x > cap else float(x)

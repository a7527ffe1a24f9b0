"""Adaptive Dormand-Prince integration of implicit scalar ODEs.

The residual ``R(t, u, u', u'') = 0`` is turned into an explicit first-order
system by isolating the highest derivative at every stage: in closed form when
R is affine in it, otherwise by a bracketed root search seeded by extrapolating the last
accepted values (continuity picks the branch).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .symodes import BinOp, Call, Neg, Node, Num, OdeExpr, Param, Sym, compile_expr

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# 5th minus embedded 4th order weights; last entry multiplies the FSAL stage
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


class SolveError(RuntimeError):
    def __init__(self, reason: str, t_fail: float):
        super().__init__(f"{reason} at t={t_fail:.6g}")
        self.reason = reason
        self.t_fail = t_fail


@dataclass
class IvpSpec:
    residual: OdeExpr
    initial_state: Sequence[float]
    t_grid: np.ndarray
    force: Callable[[float], float] | None = None
    order: int | None = None
    blow_up: float = 1e6
    atol: float = 1e-8
    rtol: float = 1e-8
    max_steps: int = 100_000

    def __post_init__(self):
        if self.order is None:
            self.order = self.residual.order
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        if len(self.initial_state) != self.order:
            raise ValueError(f"order {self.order} needs {self.order} initial values, got {len(self.initial_state)}")
        if self.atol <= 0 or self.rtol <= 0:
            raise ValueError("tolerances must be positive")
        if not self.residual.is_bound:
            raise ValueError("residual has unbound constants")


def degree(node: Node, sym: str) -> float:
    """Polynomial degree of ``node`` in symbol ``sym`` (inf when not polynomial)."""
    if isinstance(node, Sym):
        return 1.0 if node.name == sym else 0.0
    if isinstance(node, (Num, Param)):
        return 0.0
    if isinstance(node, Neg):
        return degree(node.arg, sym)
    if isinstance(node, Call):
        return 0.0 if degree(node.arg, sym) == 0 else math.inf
    if isinstance(node, BinOp):
        dl, dr = degree(node.left, sym), degree(node.right, sym)
        if node.op in "+-":
            return max(dl, dr)
        if node.op == "*":
            return dl + dr
        if node.op == "/":
            return dl if dr == 0 else math.inf
        if node.op == "^":
            if dr != 0:
                return math.inf
            if dl == 0:
                return 0.0
            if isinstance(node.right, Num) and float(node.right.value).is_integer() and node.right.value >= 0:
                return dl * node.right.value
            return math.inf
    raise TypeError(node)


_TOP = {1: "du", 2: "ddu"}


class HighestDerivative:
    """Solves ``R(t, u, u', h) = 0`` for the highest derivative ``h``."""

    def __init__(self, residual: OdeExpr, order: int, force: Callable | None = None):
        if order not in (1, 2):
            raise ValueError(f"cannot reduce an order-{order} equation")
        self.order = order
        self.fn = compile_expr(residual)
        self.consts = np.asarray(residual.constants, dtype=float)
        self.force = force
        self.affine = degree(residual.ast, _TOP[order]) <= 1
        self._hist: list[tuple[float, float]] = []

    def accept(self, t: float, h: float) -> None:
        """Record an accepted value; the last two drive the root-search seed."""
        self._hist = (self._hist + [(t, h)])[-2:]

    def seed(self, t: float) -> float:
        # linear extrapolation keeps the branch through crossings like h = +-3u at u = 0
        if not self._hist:
            return 0.0
        if len(self._hist) == 1:
            return self._hist[0][1]
        (ta, ha), (tb, hb) = self._hist
        return hb + (t - tb) * (hb - ha) / (tb - ta) if tb > ta else hb

    def g(self, t: float, y: Sequence[float], h: float) -> float:
        if self.order == 1:
            v = self.fn(t, y[0], h, None, self.consts)
        else:
            v = self.fn(t, y[0], y[1], h, self.consts)
        if self.force is not None:
            v = v - self.force(t)
        return float(v)

    def __call__(self, t: float, y: Sequence[float]) -> float:
        with np.errstate(all="ignore"):
            if self.affine:
                b = self.g(t, y, 0.0)
                a = self.g(t, y, 1.0) - b
                if a == 0.0 or not math.isfinite(a) or not math.isfinite(b):
                    raise SolveError("singular highest-derivative coefficient", t)
                return -b / a
            return self._root(t, y)

    def _root(self, t: float, y: Sequence[float]) -> float:
        seed = self.seed(t)
        f = lambda h: self.g(t, y, h)
        f0 = f(seed)
        if f0 == 0.0:
            return seed
        width = 1e-6 * max(1.0, abs(seed))
        # lower side first: the branch preference when two roots straddle the seed
        for _ in range(80):
            for lo, hi in ((seed - width, seed), (seed, seed + width)):
                flo, fhi = f(lo), f(hi)
                if math.isfinite(flo) and math.isfinite(fhi) and flo * fhi <= 0.0:
                    return brentq(f, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
            width *= 2.0
            if width > 1e12:
                break
        # tangential (double) roots never change sign
        res = minimize_scalar(lambda h: f(h) ** 2, bracket=(seed - 1.0, seed + 1.0))
        if res.success and math.isfinite(res.fun) and math.sqrt(res.fun) <= 1e-10 * (1.0 + abs(res.x)):
            return float(res.x)
        raise SolveError("no sign change in root bracket", t)


def to_first_order(spec: IvpSpec) -> tuple[Callable[[float, np.ndarray], np.ndarray], HighestDerivative]:
    """Vector field of the order-reduced system (y1 = u, y2 = u')."""
    if spec.order == 0:
        raise ValueError("order-0 residual is algebraic, not an ODE")
    iso = HighestDerivative(spec.residual, spec.order, spec.force)
    if spec.order == 1:
        return (lambda t, y: np.array([iso(t, y)])), iso
    return (lambda t, y: np.array([y[1], iso(t, y)])), iso


def solve_ivp(spec: IvpSpec):
    """Integrate on ``spec.t_grid``; returns a Trajectory or raises SolveError."""
    from .trajectories import Trajectory

    f, iso = to_first_order(spec)
    grid = spec.t_grid
    y = np.asarray(spec.initial_state, dtype=float).copy()
    t = float(grid[0])
    n = len(grid)
    states = np.empty((n, len(y)))
    top = np.empty(n)

    k1 = f(t, y)
    iso.accept(t, float(k1[-1]))
    states[0], top[0] = y, k1[-1]

    span = grid[-1] - grid[0]
    scale = spec.atol + spec.rtol * np.abs(y)
    d0, d1 = np.linalg.norm(y / scale) / math.sqrt(len(y)), np.linalg.norm(k1 / scale) / math.sqrt(len(y))
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
    h = min(h, span if span > 0 else 1.0)
    steps = 0
    for i in range(1, n):
        t_next = float(grid[i])
        while t < t_next:
            if steps >= spec.max_steps:
                raise SolveError("step budget exhausted", t)
            steps += 1
            last = t + h >= t_next - 1e-12 * max(1.0, abs(t_next))
            step = t_next - t if last else h
            try:
                k = [k1]
                for s in range(1, 6):
                    ys = y + step * sum(a * kk for a, kk in zip(_A[s], k))
                    k.append(f(t + _C[s] * step, ys))
                y_new = y + step * sum(b * kk for b, kk in zip(_B, k))
                k7 = f(t + step, y_new)
            except SolveError:
                if step < 1e-12 * max(1.0, abs(t)):
                    raise
                h = step * 0.25
                continue
            err_vec = step * (sum(e * kk for e, kk in zip(_E, k)) + _E[6] * k7)
            sc = spec.atol + spec.rtol * np.maximum(np.abs(y), np.abs(y_new))
            err = float(np.sqrt(np.mean((err_vec / sc) ** 2)))
            if not math.isfinite(err):
                err = math.inf
            if err <= 1.0:
                t = t_next if last else t + step
                y, k1 = y_new, k7
                iso.accept(t, float(k1[-1]))
                if np.max(np.abs(y)) > spec.blow_up or not np.all(np.isfinite(y)):
                    raise SolveError("blow-up", t)
                fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                if not last or fac < 1.0:
                    h = step * fac
            else:
                h = step * max(0.1, 0.9 * err ** -0.2) if math.isfinite(err) else step * 0.1
            if h < 1e-14 * max(1.0, abs(t)):
                raise SolveError("step size underflow", t)
        states[i], top[i] = y, k1[-1]

    if spec.order == 1:
        return Trajectory(t=grid.copy(), u=states[:, 0], du=top, provenance="numeric-solve")
    return Trajectory(t=grid.copy(), u=states[:, 0], du=states[:, 1], ddu=top, provenance="numeric-solve")

"""Benchmark protocol: what is observed, how a problem is searched, how results are scored."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .odesolver import IvpSpec, SolveError, solve_ivp
from .search import Candidate, ProblemSpec
from .symodes import OdeExpr, complexity, evaluate, interpret
from .trajectories import (BenchmarkProblem, Trajectory, add_noise, floor_error, observe, relative_l2,
                           solve_ground_truth)

DEFAULT_CLOSURE = {1: "explicit", 2: "implicit", 3: "forced"}
OBSERVED = {1: ("u",), 2: ("u",), 3: ("ddu",)}


def problem_spec(p: BenchmarkProblem, closure: str | None = None, order: int | None = None) -> ProblemSpec:
    closure = closure or DEFAULT_CLOSURE[p.suite]
    if order is None and p.suite == 3:
        order = p.order
    ics = tuple(p.initial_values) if p.suite == 3 else None
    return ProblemSpec(closure=closure, order=order, force=p.force if closure == "forced" else None,
                       initial_conditions=ics)


def observations(p: BenchmarkProblem, noise: float, seed: int, truth: Trajectory | None = None) -> Trajectory:
    """Noisy version of the channels a method is allowed to see for this suite."""
    truth = truth or solve_ground_truth(p)
    obs = observe(truth, OBSERVED[p.suite])
    return add_noise(obs, noise, seed) if noise > 0 else replace(obs, provenance="noisy-observation")


@dataclass
class Score:
    l2_u: float
    l2_du: float
    l2_ddu: float | None
    rel_complexity: float | None
    solved: bool

    def floored(self) -> "Score":
        return Score(floor_error(self.l2_u), floor_error(self.l2_du),
                     None if self.l2_ddu is None else floor_error(self.l2_ddu), self.rel_complexity, self.solved)


def solve_expression(e: OdeExpr, p: BenchmarkProblem, truth: Trajectory, with_force: bool,
                     initial_state=None) -> Trajectory:
    """Integrate a bound residual on the truth grid, by default from the problem's initial state."""
    ics = list((p.initial_values if initial_state is None else initial_state)[: e.order])
    if e.order == 2 and len(ics) < 2:
        ics.append(float(truth.du[0]))
    force = p.force_fn() if with_force else None
    spec = IvpSpec(residual=e, initial_state=ics, t_grid=truth.t, force=force, rtol=1e-9, atol=1e-10,
                   blow_up=1e6, max_steps=200_000)
    return solve_ivp(spec)


def score_expression(e: OdeExpr | None, p: BenchmarkProblem, truth: Trajectory | None = None,
                     with_force: bool | None = None, initial_state=None) -> Score:
    truth = truth or solve_ground_truth(p)
    with_force = (p.suite == 3) if with_force is None else with_force
    gt_c = complexity(p.operator_expr if p.suite != 3 else p.residual_expr)
    if e is None or e.order == 0:
        return Score(1.0, 1.0, 1.0 if p.suite > 1 else None, None, False)
    rel_c = complexity(e) / gt_c
    try:
        sol = solve_expression(e, p, truth, with_force, initial_state)
    except (SolveError, ValueError, ArithmeticError):
        return Score(1.0, 1.0, 1.0 if p.suite > 1 else None, rel_c, False)
    l2_ddu = None
    if p.suite > 1 and truth.ddu is not None:
        ddu = sol.ddu if sol.ddu is not None else _first_order_ddu(e, sol)
        l2_ddu = relative_l2(truth.ddu, ddu)
    return Score(relative_l2(truth.u, sol.u), relative_l2(truth.du, sol.du), l2_ddu, rel_c, True)


def _first_order_ddu(e: OdeExpr, sol: Trajectory) -> np.ndarray:
    return np.gradient(sol.du, sol.t, edge_order=2)


def score_candidate(c: Candidate | None, p: BenchmarkProblem, truth: Trajectory | None = None) -> Score:
    return score_expression(None if c is None else c.expr, p, truth)


def oracle_score(p: BenchmarkProblem, smoothed: Trajectory, truth: Trajectory | None = None) -> Score:
    """The true ODE started from the smoothed initial state: the floor set by the data alone."""
    if p.suite == 3:
        ics = p.initial_values
    else:
        ics = (float(smoothed.u[0]), float(smoothed.du[0]))
    return score_expression(p.operator_expr, p, truth, initial_state=ics)

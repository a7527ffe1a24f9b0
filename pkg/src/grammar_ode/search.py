"""Latent-space search for ODE skeletons with inner constant fitting.

CMA-ES proposes latent points, the GVAE decodes them into rule sequences,
each skeleton gets its constants fitted by Nelder-Mead against the residual
on smoothed data, and a gated solve decides the final ranking.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .grammar import Grammar, RuleSequence, generate
from .odesolver import IvpSpec, SolveError, solve_ivp
from .symodes import (PENALTY, ArityError, BinOp, DegenerateError, InfeasibleError, InterpretError,
                      MissingChannelError, OdeExpr, Param, Sym, bind_constants, compile_expr, complexity,
                      evaluate, highest_derivative_coefficient, interpret, is_trivial, normalize_highest_derivative,
                      render, to_json)
from .trajectories import Trajectory

GATE_OFFSET = 1e6  # candidates above the residual gate rank behind every solved one


# ---------------------------------------------------------------------------- CMA-ES


@dataclass
class CmaesResult:
    x: np.ndarray
    f: float
    history: list[float]
    generations: int


class CMAES:
    """(mu/mu_w, lambda) CMA-ES with CSA, rank-one and rank-mu updates."""

    def __init__(self, mean: Sequence[float], sigma: float, popsize: int, seed: int):
        if popsize < 2:
            raise ValueError("population size must be at least 2")
        if sigma <= 0:
            raise ValueError("initial step size must be positive")
        self.mean = np.array(mean, dtype=float)
        n = self.n = self.mean.size
        self.sigma = float(sigma)
        self.lam = popsize
        self.mu = popsize // 2
        w = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights ** 2)
        me = self.mueff
        self.cc = (4 + me / n) / (n + 4 + 2 * me / n)
        self.cs = (me + 2) / (n + me + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + me)
        self.cmu = min(1 - self.c1, 2 * (me - 2 + 1 / me) / ((n + 2) ** 2 + me))
        self.damps = 1 + 2 * max(0.0, math.sqrt((me - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.C = np.eye(n)
        self.gen = 0
        self.rng = np.random.default_rng(seed)

    def ask(self) -> np.ndarray:
        z = self.rng.standard_normal((self.lam, self.n))
        return self.mean + self.sigma * (z * self.D) @ self.B.T

    def tell(self, X: np.ndarray, f: Sequence[float]) -> None:
        f = np.asarray(f, dtype=float)
        order = np.argsort(f, kind="stable")[: self.mu]
        old = self.mean
        steps = (X[order] - old) / self.sigma
        y = self.weights @ steps
        self.mean = old + self.sigma * y
        inv_sqrt = self.B @ np.diag(1.0 / self.D) @ self.B.T
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * inv_sqrt @ y
        self.gen += 1
        ps_norm = np.linalg.norm(self.ps)
        hsig = ps_norm / math.sqrt(1 - (1 - self.cs) ** (2 * self.gen)) / self.chi_n < 1.4 + 2 / (self.n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * y
        rank_mu = (steps * self.weights[:, None]).T @ steps
        self.C = ((1 - self.c1 - self.cmu) * self.C
                  + self.c1 * (np.outer(self.pc, self.pc) + (not hsig) * self.cc * (2 - self.cc) * self.C)
                  + self.cmu * rank_mu)
        self.sigma *= math.exp((self.cs / self.damps) * (ps_norm / self.chi_n - 1))
        self.sigma = min(self.sigma, 1e8)
        self._decompose()

    def _decompose(self) -> None:
        C = (self.C + self.C.T) / 2
        evals, B = np.linalg.eigh(C)
        floor = 1e-20 * max(1.0, float(evals.max()))
        if evals.min() < floor:  # regularize a collapsing covariance
            C = C + (floor - evals.min()) * np.eye(self.n)
            evals, B = np.linalg.eigh(C)
        self.C, self.B, self.D = C, B, np.sqrt(evals)


def cmaes_minimize(f: Callable[[np.ndarray], float], x0: Sequence[float], sigma0: float = 0.5,
                   popsize: int = 20, generations: int = 100, seed: int = 0,
                   ftarget: float | None = None) -> CmaesResult:
    es = CMAES(x0, sigma0, popsize, seed)
    best_x, best_f, hist = np.array(x0, dtype=float), math.inf, []
    for _ in range(generations):
        X = es.ask()
        vals = [float(f(x)) for x in X]
        i = int(np.argmin(vals))
        if vals[i] < best_f:
            best_x, best_f = X[i].copy(), vals[i]
        hist.append(best_f)
        es.tell(X, vals)
        if ftarget is not None and best_f < ftarget:
            break
    return CmaesResult(best_x, best_f, hist, es.gen)


# ---------------------------------------------------------------------------- Nelder-Mead


@dataclass
class NelderMeadResult:
    x: np.ndarray
    f: float
    nfev: int


def nelder_mead(f: Callable[[np.ndarray], float], x0: Sequence[float], max_fev: int | None = None,
                xatol: float = 1e-8, fatol: float = 1e-10, init_step: float = 0.05,
                zero_step: float = 0.1) -> NelderMeadResult:
    """Downhill simplex with coefficients reflect 1, expand 2, contract 0.5, shrink 0.5."""
    x0 = np.asarray(x0, dtype=float)
    k = x0.size
    if k == 0:
        return NelderMeadResult(x0, float(f(x0)), 1)
    max_fev = max_fev or 200 * k
    sim = np.tile(x0, (k + 1, 1))
    for i in range(k):
        sim[i + 1, i] = x0[i] * (1 + init_step) if x0[i] != 0 else zero_step
    fs = np.array([f(x) for x in sim])
    nfev = k + 1
    while nfev < max_fev:
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        if np.max(np.abs(sim[1:] - sim[0])) <= xatol and np.max(np.abs(fs[1:] - fs[0])) <= fatol:
            break
        centroid = sim[:-1].mean(0)
        xr = centroid + (centroid - sim[-1])
        fr = f(xr)
        nfev += 1
        if fr < fs[0]:
            xe = centroid + 2.0 * (xr - centroid)
            fe = f(xe)
            nfev += 1
            sim[-1], fs[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
        else:
            outside = fr < fs[-1]
            xc = centroid + 0.5 * ((xr if outside else sim[-1]) - centroid)
            fc = f(xc)
            nfev += 1
            if fc < (fr if outside else fs[-1]):
                sim[-1], fs[-1] = xc, fc
            else:
                sim[1:] = sim[0] + 0.5 * (sim[1:] - sim[0])
                fs[1:] = [f(x) for x in sim[1:]]
                nfev += k
    i = int(np.argmin(fs))
    return NelderMeadResult(sim[i].copy(), float(fs[i]), nfev)


# ---------------------------------------------------------------------------- candidates


@dataclass
class ProblemSpec:
    """How a decoded expression becomes a residual and how it is judged.

    closure:
      ``explicit``: the expression is f(t, u) and the residual is f - u'; ranked by L_DE.
      ``implicit``: the expression is the residual; its first constant is fixed at 1.
      ``forced``:   the expression is D(u) and the known force F(t) is subtracted.
    """

    closure: str = "implicit"
    order: int | None = None
    force: str | None = None
    initial_conditions: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.closure not in ("explicit", "implicit", "forced"):
            raise ValueError(f"unknown closure {self.closure!r}")
        if self.closure == "forced" and not self.force:
            raise ValueError("forced closure needs a force expression")

    @property
    def solution_loss(self) -> bool:
        return self.closure != "explicit"


@dataclass
class SearchConfig:
    popsize: int = 100
    generations: int = 10
    sigma0: float = 0.5
    theta_de: float = 200.0
    adapt_theta: bool = True
    adapt_k: int = 20
    adapt_buffer: float = 0.05
    alpha: float = 0.1
    nm_max_fev: int = 400
    nm_xatol: float = 1e-8
    nm_fatol: float = 1e-12
    multistart: bool = True
    solve_rtol: float = 1e-6
    solve_atol: float = 1e-8
    solve_max_steps: int = 20_000
    top_k: int = 20
    seed: int = 0
    latent_init: str = "prior"  # or "data": search in coordinates standardized by the encoded training set

    def __post_init__(self):
        if self.popsize < 2 or self.sigma0 <= 0 or not 0 <= self.alpha <= 1:
            raise ValueError("need popsize >= 2, sigma0 > 0 and alpha in [0, 1]")
        if self.latent_init not in ("prior", "data"):
            raise ValueError(f"unknown latent_init {self.latent_init!r}")


@dataclass
class Candidate:
    skeleton: str
    expression: str | None = None
    constants: list[float] = field(default_factory=list)
    status: str = "ok"
    l_de: float = PENALTY
    l_sol: float | None = None
    l_ic: float | None = None
    complexity: int | None = None
    objective: float = PENALTY
    z: list[float] | None = None
    generation: int | None = None
    expr: OdeExpr | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "expr"}
        d["ast"] = to_json(self.expr) if self.expr is not None else None
        return d


def adapt_threshold(losses: Sequence[float], theta: float, k: int = 20, buffer: float = 0.05) -> float:
    """Mean of the k smallest finite losses plus a relative buffer."""
    vals = np.sort([v for v in losses if math.isfinite(v) and v < PENALTY])
    if vals.size < k:
        return theta
    return float((1.0 + buffer) * vals[:k].mean())


def _closed_residual(e: OdeExpr, spec: ProblemSpec) -> tuple[OdeExpr, list[int]]:
    """Apply the problem closure; returns the residual and the indices of free constants."""
    if spec.closure == "explicit":
        e = OdeExpr.from_ast(BinOp("-", e.ast, Sym("du")))
    free = [i for i in range(e.n_constants)]
    if spec.closure == "implicit" and free:
        free = free[1:]
    return e, free


def _skeleton_seed(seed: int, key: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{key}".encode()).digest()[:8], "little")


class CandidateEvaluator:
    """Fits and scores skeletons on one data set; results are cached per skeleton."""

    def __init__(self, data: Trajectory, spec: ProblemSpec, cfg: SearchConfig):
        self.data, self.spec, self.cfg = data, spec, cfg
        self.force_series = None
        self.force_fn = None
        if spec.force:
            fe = interpret(spec.force)
            self.force_series = evaluate(fe, data.t)
            self.force_fn = lambda t, fe=fe: evaluate(fe, np.asarray(t, dtype=float)) if np.ndim(t) else \
                float(evaluate(fe, np.array([t]))[0])
        self.theta = cfg.theta_de
        self._fits: dict[str, Candidate] = {}
        self._solutions: dict[str, tuple[float | None, str]] = {}

    # -- stage 1: constants -------------------------------------------
    def _residual_loss(self, e: OdeExpr, fn, free: list[int], base: np.ndarray, normalize: bool):
        d, t = self.data, self.data.t
        consts = base.copy()

        def loss(x):
            consts[free] = x
            with np.errstate(all="ignore"):
                r = fn(t, d.u, d.du, d.ddu, consts)
                if self.force_series is not None:
                    r = r - self.force_series
                if normalize:
                    try:
                        c = highest_derivative_coefficient(bind_constants(e, consts))
                    except DegenerateError:
                        return PENALTY
                    if not math.isfinite(c) or abs(c) < 1e-12:
                        return PENALTY
                    r = r / c
                v = float(np.sqrt(np.mean(np.square(r))))
            return v if math.isfinite(v) and v < PENALTY else PENALTY

        return loss

    def fit(self, skeleton: str) -> Candidate:
        if skeleton in self._fits:
            return self._fits[skeleton]
        cand = self._fit(skeleton)
        self._fits[skeleton] = cand
        return cand

    def _fit(self, skeleton: str) -> Candidate:
        spec = self.spec
        try:
            raw = interpret(skeleton)
        except (InterpretError, ArityError) as exc:
            return Candidate(skeleton, status=f"invalid: {exc}")
        e, free = _closed_residual(raw, spec)
        if e.order == 0:
            return Candidate(skeleton, status="no-derivative")
        if spec.order is not None and e.order != spec.order:
            return Candidate(skeleton, status="order-mismatch")
        missing = [c for c in e.channels if c != "t" and getattr(self.data, c) is None]
        if missing:
            return Candidate(skeleton, status=f"missing-channel {missing[0]}")
        base = np.ones(e.n_constants)
        trivial_force = self.force_fn if spec.closure == "forced" else None
        if is_trivial(bind_constants(e, base), force=trivial_force):
            return Candidate(skeleton, status="trivial")
        normalize = spec.closure != "forced"
        loss = self._residual_loss(e, compile_expr(e), free, base, normalize)
        fits = [nelder_mead(loss, base[free], self.cfg.nm_max_fev, self.cfg.nm_xatol, self.cfg.nm_fatol)]
        if self.cfg.multistart and free and fits[0].f > self.theta:
            rng = np.random.default_rng(_skeleton_seed(self.cfg.seed, skeleton))
            x1 = rng.uniform(-2.0, 2.0, len(free))
            fits.append(nelder_mead(loss, x1, self.cfg.nm_max_fev, self.cfg.nm_xatol, self.cfg.nm_fatol))
        best = min(fits, key=lambda r: r.f)
        consts = base.copy()
        consts[free] = best.x
        if best.f >= PENALTY:
            return Candidate(skeleton, constants=consts.tolist(), status="infeasible")
        bound = bind_constants(e, consts)
        try:
            final = normalize_highest_derivative(bound) if normalize else bound
        except DegenerateError:
            return Candidate(skeleton, constants=consts.tolist(), status="degenerate")
        if is_trivial(final, force=trivial_force):
            return Candidate(skeleton, constants=consts.tolist(), status="trivial")
        return Candidate(skeleton, expression=str(final), constants=consts.tolist(), l_de=best.f,
                         complexity=complexity(final), expr=final)

    # -- stage 2: gated solve -------------------------------------------
    def initial_state(self, order: int) -> tuple[float, ...]:
        if self.spec.initial_conditions is not None and len(self.spec.initial_conditions) >= order:
            return tuple(self.spec.initial_conditions[:order])
        d = self.data
        return (float(d.u[0]),) if order == 1 else (float(d.u[0]), float(d.du[0]))

    def solution_loss(self, cand: Candidate) -> tuple[float | None, str]:
        key = cand.skeleton
        if key in self._solutions:
            return self._solutions[key]
        e = cand.expr
        spec = IvpSpec(residual=e, initial_state=self.initial_state(e.order), t_grid=self.data.t,
                       force=self.force_fn if self.spec.closure == "forced" else None,
                       rtol=self.cfg.solve_rtol, atol=self.cfg.solve_atol, max_steps=self.cfg.solve_max_steps)
        try:
            sol = solve_ivp(spec)
            out = (standardized_mse(self.data, sol, e.order), "ok")
        except (SolveError, ValueError, ArithmeticError) as exc:
            out = (None, f"solve-failed: {getattr(exc, 'reason', exc)}")
        self._solutions[key] = out
        return out

    def l_ic(self, c: int, acc: float) -> float:
        return self.cfg.alpha * c + (1 - self.cfg.alpha) * self.data.n_s * acc

    def score(self, skeleton: str) -> Candidate:
        """Full record under the current gate threshold."""
        cand = replace(self.fit(skeleton))
        if cand.expr is None:
            cand.objective = PENALTY
            return cand
        if not self.spec.solution_loss:
            cand.objective = cand.l_de
            cand.l_ic = self.l_ic(cand.complexity, cand.l_de)
            return cand
        if cand.l_de < self.theta:
            l_sol, status = self.solution_loss(cand)
            if l_sol is not None and math.isfinite(l_sol):
                cand.l_sol = l_sol
                cand.l_ic = self.l_ic(cand.complexity, l_sol)
                cand.objective = cand.l_ic
                return cand
            cand.status = status
        else:
            cand.status = "gated"
        cand.l_ic = self.l_ic(cand.complexity, cand.l_de)
        cand.objective = GATE_OFFSET + cand.l_ic
        return cand


def standardized_mse(ref: Trajectory, sol: Trajectory, order: int) -> float:
    total = 0.0
    names = ("u", "du", "ddu") if order >= 2 else ("u", "du")
    for name in names:
        a, b = getattr(ref, name), getattr(sol, name)
        if a is None or b is None:
            continue
        var = max(float(np.var(a)), 1e-12)
        total += float(np.mean((a - b) ** 2)) / var
    return total


def evaluate_candidate(seq: RuleSequence | str, g: Grammar | None, data: Trajectory, spec: ProblemSpec,
                       cfg: SearchConfig = SearchConfig(), theta: float | None = None) -> Candidate:
    """One-off evaluation of a rule sequence (or skeleton string)."""
    ev = CandidateEvaluator(data, spec, cfg)
    if theta is not None:
        ev.theta = theta
    skeleton = seq if isinstance(seq, str) else generate(g, seq)
    return ev.score(skeleton)


# ---------------------------------------------------------------------------- discovery


@dataclass
class DiscoveryResult:
    candidates: list[Candidate]
    meta: dict
    log: list[dict] = field(default_factory=list)
    wall_time: float = 0.0  # kept out of the JSON so identical runs serialize identically

    @property
    def best(self) -> Candidate | None:
        return self.candidates[0] if self.candidates else None

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "candidates": [c.to_dict() for c in self.candidates],
                           "log": self.log}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DiscoveryResult":
        from .symodes import from_json

        d = json.loads(text)
        cands = []
        for c in d["candidates"]:
            ast = c.pop("ast")
            cands.append(Candidate(**c, expr=from_json(ast) if ast else None))
        return cls(cands, d["meta"], d.get("log", []))

    def write_log_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["generation", "best_l_de", "theta_de", "best_l_ic"])
            w.writeheader()
            for row in self.log:
                w.writerow(row)


def config_hash(*objs) -> str:
    blob = json.dumps([asdict(o) if hasattr(o, "__dataclass_fields__") else o for o in objs],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def discover(model, g: Grammar, data: Trajectory, spec: ProblemSpec, cfg: SearchConfig = SearchConfig(),
             smoother_cfg=None, progress: Callable[[dict], None] | None = None,
             latent_frame: tuple[np.ndarray, np.ndarray] | None = None) -> DiscoveryResult:
    """Smooth (unless already smoothed), then search the latent space.

    ``data`` must carry whatever channel is observed; when its provenance is
    ``smoothed`` it is used as-is. With ``latent_frame = (center, scale)`` CMA-ES
    runs on x and decodes z = center + scale * x.
    """
    from .gvae import MaskedDecoder, decode_latent
    from .smoother import SmootherConfig, smooth

    start = time.monotonic()
    if data.provenance != "smoothed":
        scfg = smoother_cfg or SmootherConfig(seed=cfg.seed)
        if data.u is None and scfg.initial_conditions is None and spec.initial_conditions is not None:
            scfg = replace(scfg, initial_conditions=tuple(spec.initial_conditions[:2]))
        data = smooth(data, scfg)
    ev = CandidateEvaluator(data, spec, cfg)
    decoder = MaskedDecoder(g)
    d_z = model.cfg.d_z
    center, scale = latent_frame if latent_frame is not None else (np.zeros(d_z), np.ones(d_z))
    es = CMAES(np.zeros(d_z), cfg.sigma0, cfg.popsize, cfg.seed)
    seen: dict[str, tuple[list[float], int]] = {}
    log = []
    for gen in range(cfg.generations):
        X = es.ask()
        Z = center + scale * X
        seqs = decode_latent(model, g, Z, decoder=decoder)
        skels = [generate(g, s) for s in seqs]
        recs = [ev.score(s) for s in skels]
        for x, s in zip(Z, skels):
            seen.setdefault(s, ([float(v) for v in x], gen))
        es.tell(X, [r.objective for r in recs])
        l_des = [r.l_de for r in recs if r.expr is not None]
        ok_ic = [r.l_ic for r in recs if r.objective < GATE_OFFSET and r.l_ic is not None]
        log.append({"generation": gen, "best_l_de": min(l_des) if l_des else PENALTY, "theta_de": ev.theta,
                    "best_l_ic": min(ok_ic) if ok_ic else None})
        if progress:
            progress(log[-1])
        if cfg.adapt_theta and spec.solution_loss:
            ev.theta = adapt_threshold(l_des, ev.theta, cfg.adapt_k, cfg.adapt_buffer)
    # final ranking under the last threshold; gate monotonicity keeps earlier solves valid
    final = []
    for skel, (z, gen) in seen.items():
        r = ev.score(skel)
        if r.expr is None:
            continue
        r.z, r.generation = z, gen
        final.append(r)
    final.sort(key=lambda r: (r.objective, r.l_de, r.skeleton))
    meta = {"seed": cfg.seed, "config_hash": config_hash(cfg, spec), "code_version": __version__,
            "grammar_hash": g.hash, "n_evaluated": len(seen), "theta_de_final": ev.theta,
            "n_penalized": sum(1 for s in seen if ev.fit(s).expr is None)}
    return DiscoveryResult(final[: cfg.top_k], meta, log, time.monotonic() - start)

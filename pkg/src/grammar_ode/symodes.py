"""Implicit ODE residuals ``D(u, u', u'') - F(t)`` as small expression trees.

Expressions come from grammar strings such as ``C * diff ( u , t ) + C * u``.
Every ``C`` becomes a numbered placeholder; binding fills in values without
changing the tree, so skeleton-level properties (complexity, order) survive
constant fitting.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "log")
SYMBOLS = ("t", "u", "du", "ddu")
DERIV_ORDER = {"u": 0, "du": 1, "ddu": 2}

PENALTY = 1e9


class InterpretError(ValueError):
    pass


class ArityError(ValueError):
    pass


class MissingChannelError(KeyError):
    pass


class InfeasibleError(ArithmeticError):
    """Non-finite value while evaluating a candidate."""


class DegenerateError(ArithmeticError):
    """Highest-derivative coefficient vanishes; the equation cannot be normalized."""


# --------------------------------------------------------------------------- tree


class Node:
    __slots__ = ()

    def children(self) -> tuple["Node", ...]:
        return ()


@dataclass(frozen=True)
class Num(Node):
    value: float


@dataclass(frozen=True)
class Param(Node):
    """Constant placeholder ``C_index`` (1-based); ``value`` is None until bound."""

    index: int
    value: float | None = None


@dataclass(frozen=True)
class Sym(Node):
    name: str  # one of SYMBOLS


@dataclass(frozen=True)
class BinOp(Node):
    op: str  # + - * / ^
    left: Node
    right: Node

    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True)
class Neg(Node):
    arg: Node

    def children(self):
        return (self.arg,)


@dataclass(frozen=True)
class Call(Node):
    fn: str
    arg: Node

    def children(self):
        return (self.arg,)


def walk(node: Node):
    yield node
    for ch in node.children():
        yield from walk(ch)


@dataclass(frozen=True)
class OdeExpr:
    ast: Node
    order: int
    n_constants: int

    @classmethod
    def from_ast(cls, ast: Node) -> "OdeExpr":
        order, n_params = -1, 0
        for n in walk(ast):
            if isinstance(n, Sym) and n.name in DERIV_ORDER:
                order = max(order, DERIV_ORDER[n.name])
            elif isinstance(n, Param):
                n_params += 1
        return cls(ast, max(order, 0), n_params)

    @property
    def is_bound(self) -> bool:
        return all(n.value is not None for n in walk(self.ast) if isinstance(n, Param))

    @property
    def constants(self) -> list[float | None]:
        return [n.value for n in sorted((n for n in walk(self.ast) if isinstance(n, Param)), key=lambda p: p.index)]

    @property
    def channels(self) -> set[str]:
        return {n.name for n in walk(self.ast) if isinstance(n, Sym)}

    def __str__(self) -> str:
        return render(self.ast)

    def skeleton(self) -> str:
        return render(self.ast, skeleton=True)


# --------------------------------------------------------------------------- interpretation

_LEX = re.compile(r"\s*(?:(\d+\.\d*(?:[eE][+-]?\d+)?|\d*\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(\S))")


def lex(expr: str) -> list[str]:
    out, pos = [], 0
    expr = expr.rstrip()
    while pos < len(expr):
        m = _LEX.match(expr, pos)
        if not m:
            raise InterpretError(f"cannot lex {expr[pos:]!r}")
        out.append(next(g for g in m.groups() if g is not None))
        pos = m.end()
    return out


class _Parser:
    def __init__(self, tokens: Sequence[str]):
        self.toks = list(tokens)
        self.pos = 0
        self.n_params = 0

    def peek(self) -> str | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self, expect: str | None = None) -> str:
        tok = self.peek()
        if tok is None:
            raise InterpretError("unexpected end of expression")
        if expect is not None and tok != expect:
            raise InterpretError(f"expected {expect!r}, got {tok!r} at token {self.pos}")
        self.pos += 1
        return tok

    def parse(self) -> Node:
        node = self.sum()
        if self.peek() is not None:
            raise InterpretError(f"trailing tokens from {self.peek()!r}")
        return node

    def sum(self) -> Node:
        node = self.product()
        while self.peek() in ("+", "-"):
            op = self.take()
            node = BinOp(op, node, self.product())
        return node

    def product(self) -> Node:
        node = self.power()
        while self.peek() in ("*", "/"):
            op = self.take()
            node = BinOp(op, node, self.power())
        return node

    def power(self) -> Node:
        base = self.unary()
        if self.peek() == "^":
            self.take()
            return BinOp("^", base, self.power())
        return base

    def unary(self) -> Node:
        if self.peek() == "-":
            self.take()
            arg = self.unary()
            if isinstance(arg, Num):
                return Num(-arg.value)
            return Neg(arg)
        return self.atom()

    def atom(self) -> Node:
        tok = self.take()
        if tok == "(":
            node = self.sum()
            self.take(")")
            return node
        if tok == "C":
            self.n_params += 1
            return Param(self.n_params)
        if tok in ("t", "u"):
            return Sym(tok)
        if tok in ("du", "ddu"):
            return Sym(tok)
        if tok in FUNCTIONS:
            self.take("(")
            arg = self.sum()
            self.take(")")
            return Call(tok, arg)
        if tok == "diff":
            self.take("(")
            inner = self.sum()
            self.take(",")
            self.take("t")
            self.take(")")
            if inner == Sym("u"):
                return Sym("du")
            if inner == Sym("du"):
                return Sym("ddu")
            raise InterpretError(f"derivative of {render(inner)!r}; only u and du/dt may be differentiated")
        if tok == "pi":
            return Num(math.pi)
        try:
            return Num(float(tok))
        except ValueError:
            raise InterpretError(f"unexpected token {tok!r}") from None


def interpret(expr: str, g=None) -> OdeExpr:
    """Map a terminal string to an ODE residual tree."""
    tokens = g.tokenize(expr) if g is not None else lex(expr)
    return OdeExpr.from_ast(_Parser(tokens).parse())


def bind_constants(e: OdeExpr, values: Sequence[float]) -> OdeExpr:
    values = list(values)
    if len(values) != e.n_constants:
        raise ArityError(f"expression has {e.n_constants} constants, got {len(values)} values")
    if not values:
        return e

    def rec(n: Node) -> Node:
        if isinstance(n, Param):
            return Param(n.index, float(values[n.index - 1]))
        if isinstance(n, BinOp):
            return BinOp(n.op, rec(n.left), rec(n.right))
        if isinstance(n, Neg):
            return Neg(rec(n.arg))
        if isinstance(n, Call):
            return Call(n.fn, rec(n.arg))
        return n

    return OdeExpr(rec(e.ast), e.order, e.n_constants)


# --------------------------------------------------------------------------- rendering

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


def _fmt(v: float) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def render(node: Node, skeleton: bool = False) -> str:
    """Canonical, re-parseable text. ``skeleton`` prints every placeholder as ``C``."""

    def rec(n: Node, parent: int, right: bool) -> str:
        if isinstance(n, (Num, Param)):
            if isinstance(n, Param) and (skeleton or n.value is None):
                return "C"
            s = _fmt(n.value)
            return f"({s})" if n.value < 0 and (parent >= 3 or right) else s
        if isinstance(n, Sym):
            return {"t": "t", "u": "u", "du": "diff(u,t)", "ddu": "diff(diff(u,t),t)"}[n.name]
        if isinstance(n, Call):
            return f"{n.fn}({rec(n.arg, 0, False)})"
        if isinstance(n, Neg):
            s = "-" + rec(n.arg, 3, False)
            return f"({s})" if parent > 0 else s
        if isinstance(n, BinOp):
            p = _PREC[n.op]
            if n.op == "^":
                s = f"{rec(n.left, p + 1, False)}^{rec(n.right, p, True)}"
            else:
                s = f"{rec(n.left, p, False)} {n.op} {rec(n.right, p + 1, True)}" if p == 1 else \
                    f"{rec(n.left, p, False)}*{rec(n.right, p + 1, True)}" if n.op == "*" else \
                    f"{rec(n.left, p, False)}/{rec(n.right, p + 1, True)}"
            return f"({s})" if p < parent else s
        raise TypeError(n)

    return rec(node, 0, False)


def to_json(e: OdeExpr) -> dict:
    def rec(n: Node):
        if isinstance(n, Num):
            return {"num": n.value}
        if isinstance(n, Param):
            return {"param": n.index, "value": n.value}
        if isinstance(n, Sym):
            return {"sym": n.name}
        if isinstance(n, BinOp):
            return {"op": n.op, "args": [rec(n.left), rec(n.right)]}
        if isinstance(n, Neg):
            return {"op": "neg", "args": [rec(n.arg)]}
        if isinstance(n, Call):
            return {"call": n.fn, "args": [rec(n.arg)]}
        raise TypeError(n)

    return {"ast": rec(e.ast), "order": e.order, "n_constants": e.n_constants, "text": render(e.ast)}


def from_json(d: Mapping) -> OdeExpr:
    def rec(j) -> Node:
        if "num" in j:
            return Num(float(j["num"]))
        if "param" in j:
            return Param(int(j["param"]), None if j.get("value") is None else float(j["value"]))
        if "sym" in j:
            return Sym(j["sym"])
        if "call" in j:
            return Call(j["call"], rec(j["args"][0]))
        if j["op"] == "neg":
            return Neg(rec(j["args"][0]))
        return BinOp(j["op"], rec(j["args"][0]), rec(j["args"][1]))

    return OdeExpr.from_ast(rec(d["ast"]))


# --------------------------------------------------------------------------- evaluation


def _pysrc(n: Node) -> str:
    if isinstance(n, Num):
        return f"({float(n.value)!r})"
    if isinstance(n, Param):
        return f"c[{n.index - 1}]"
    if isinstance(n, Sym):
        return n.name
    if isinstance(n, Neg):
        return f"(-{_pysrc(n.arg)})"
    if isinstance(n, Call):
        return f"_np.{n.fn}({_pysrc(n.arg)})"
    if isinstance(n, BinOp):
        op = "**" if n.op == "^" else n.op
        return f"({_pysrc(n.left)} {op} {_pysrc(n.right)})"
    raise TypeError(n)


@lru_cache(maxsize=65536)
def _compile_src(src: str) -> Callable:
    code = f"def _f(t, u, du, ddu, c):\n    return {src}\n"
    ns: dict = {"_np": np}
    exec(code, ns)
    return ns["_f"]


def compile_expr(e: OdeExpr | Node) -> Callable:
    """``f(t, u, du, ddu, c)``; placeholders read from ``c`` so a skeleton compiles once."""
    ast = e.ast if isinstance(e, OdeExpr) else e
    return _compile_src(_pysrc(ast))


def evaluate(e: OdeExpr, t, u=None, du=None, ddu=None, constants: Sequence[float] | None = None):
    if constants is None:
        constants = e.constants
        if any(v is None for v in constants):
            raise ArityError("expression has unbound constants")
    with np.errstate(all="ignore"):
        out = compile_expr(e)(t, u, du, ddu, np.asarray(constants, dtype=float))
    return np.broadcast_to(np.asarray(out, dtype=float), np.shape(t)).copy()


def eval_residual(e: OdeExpr, traj, force=None, constants: Sequence[float] | None = None,
                  scale: float = 1.0) -> np.ndarray:
    """Pointwise ``(D(u, u', u'') - F(t)) / scale`` on the trajectory grid."""
    channels = {"t": traj.t, "u": traj.u, "du": traj.du, "ddu": traj.ddu}
    for name in e.channels:
        if channels[name] is None:
            raise MissingChannelError(name)
    r = evaluate(e, channels["t"], channels["u"], channels["du"], channels["ddu"], constants)
    if force is not None:
        r = r - np.asarray(force, dtype=float)
    if scale != 1.0:
        r = r / scale
    if not np.all(np.isfinite(r)):
        raise InfeasibleError("non-finite residual")
    return r


def l_de(residual: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(residual))))


# --------------------------------------------------------------------------- normalization

Monomial = tuple  # sorted tuple of (atom key, power)


def _poly_mul(a: dict, b: dict) -> dict:
    out: dict = {}
    for ma, ca in a.items():
        for mb, cb in b.items():
            powers = dict(ma)
            for k, p in mb:
                powers[k] = powers.get(k, 0) + p
            m = tuple(sorted((k, p) for k, p in powers.items() if p != 0))
            out[m] = out.get(m, 0.0) + ca * cb
    return out


def _poly_add(a: dict, b: dict, sign: float = 1.0) -> dict:
    out = dict(a)
    for m, c in b.items():
        out[m] = out.get(m, 0.0) + sign * c
    return out


def _prune(p: dict) -> dict:
    if not p:
        return p
    big = max(abs(c) for c in p.values())
    return {m: c for m, c in p.items() if abs(c) > 1e-12 * big and c != 0.0}


def _poly_key(p: dict) -> str:
    return "+".join(f"{c:.12g}*{'.'.join(f'{k}^{q}' for k, q in m)}" for m, c in sorted(p.items()))


def expand(node: Node) -> dict:
    """Sum-of-monomials form with numeric coefficients (constants must be bound)."""
    if isinstance(node, Num):
        return {(): node.value} if node.value != 0 else {}
    if isinstance(node, Param):
        if node.value is None:
            raise ArityError("cannot expand an unbound constant")
        return {(): node.value} if node.value != 0 else {}
    if isinstance(node, Sym):
        return {((node.name, 1),): 1.0}
    if isinstance(node, Neg):
        return {m: -c for m, c in expand(node.arg).items()}
    if isinstance(node, Call):
        arg = _prune(expand(node.arg))
        if set(arg) <= {()}:
            with np.errstate(all="ignore"):
                v = float(getattr(np, node.fn)(arg.get((), 0.0)))
            return {(): v} if v != 0 else {}
        return {((f"{node.fn}({_poly_key(arg)})", 1),): 1.0}
    if isinstance(node, BinOp):
        if node.op in "+-":
            return _prune(_poly_add(expand(node.left), expand(node.right), 1.0 if node.op == "+" else -1.0))
        if node.op == "*":
            return _prune(_poly_mul(expand(node.left), expand(node.right)))
        if node.op == "/":
            num, den = expand(node.left), _prune(expand(node.right))
            if len(den) == 1:
                (m, c), = den.items()
                inv = {tuple((k, -p) for k, p in m): 1.0 / c}
                return _prune(_poly_mul(num, inv))
            return _prune(_poly_mul(num, {((f"inv({_poly_key(den)})", 1),): 1.0}))
        if node.op == "^":
            base, ex = _prune(expand(node.left)), _prune(expand(node.right))
            if set(ex) <= {()}:
                n = ex.get((), 0.0)
                if float(n).is_integer() and len(base) == 1:
                    (m, c), = base.items()
                    return {tuple((k, p * int(n)) for k, p in m): c ** n}
                if float(n).is_integer() and 0 <= n <= 8:
                    out = {(): 1.0}
                    for _ in range(int(n)):
                        out = _poly_mul(out, base)
                    return _prune(out)
            return {((f"pow({_poly_key(base)};{_poly_key(ex)})", 1),): 1.0}
    raise TypeError(node)


def _top_symbol(order: int) -> str:
    return {0: "u", 1: "du", 2: "ddu"}[order]


def highest_derivative_coefficient(e: OdeExpr) -> float:
    """Numeric coefficient of the leading highest-derivative monomial.

    The monomial that is the bare derivative is preferred; otherwise the
    lowest-degree monomial containing it (ties broken by key).
    """
    poly = expand(e.ast)
    sym = _top_symbol(e.order)
    direct = [m for m in poly if any(k == sym for k, _ in m)]
    if not direct:
        raise DegenerateError(f"no surviving term contains {sym}")
    bare = ((sym, 1),)
    if bare in poly:
        return poly[bare]
    m = min(direct, key=lambda m: (sum(abs(p) for _, p in m), len(m), repr(m)))
    return poly[m]


def _is_scalar(n: Node) -> bool:
    return isinstance(n, Num) or (isinstance(n, Param) and n.value is not None)


def _scale_term(n: Node, k: float) -> Node:
    if isinstance(n, Num):
        return Num(n.value * k)
    if isinstance(n, Param):
        return Param(n.index, n.value * k)
    if isinstance(n, Neg):
        return Neg(_scale_term(n.arg, k))
    if isinstance(n, BinOp) and n.op in "*/":
        leaf = n.left
        while isinstance(leaf, BinOp) and leaf.op in "*/":
            leaf = leaf.left
        if _is_scalar(leaf) or isinstance(leaf, Neg):
            return BinOp(n.op, _scale_term(n.left, k), n.right)
    return BinOp("*", Num(k), n)


def _drop_unit(n: Node) -> Node:
    if isinstance(n, BinOp) and n.op == "*" and isinstance(n.left, Num) and n.left.value == 1.0:
        return n.right
    if isinstance(n, BinOp) and n.op in "*/":
        left = _drop_unit(n.left)
        return BinOp(n.op, left, n.right) if left is not n.left else n
    return n


def _leading_value(n: Node) -> float:
    while isinstance(n, BinOp) and n.op in "*/":
        n = n.left
    if isinstance(n, Num):
        return n.value
    if isinstance(n, Param):
        return n.value
    return -1.0 if isinstance(n, Neg) else 1.0


def _scale_sum(n: Node, k: float) -> Node:
    if isinstance(n, BinOp) and n.op in "+-":
        left = _scale_sum(n.left, k)
        s = k if n.op == "+" else -k
        right = _drop_unit(_scale_term(n.right, s))
        if _leading_value(right) < 0:  # keep signs readable: a - 2*x rather than a + -2*x
            return BinOp("-", left, _drop_unit(_scale_term(n.right, -s)))
        return BinOp("+", left, right)
    return _drop_unit(_scale_term(n, k))


def normalize_highest_derivative(e: OdeExpr) -> OdeExpr:
    """Divide every additive term by the highest-derivative coefficient."""
    c = highest_derivative_coefficient(e)
    if c == 1.0:
        return e
    return OdeExpr.from_ast(_scale_sum(e.ast, 1.0 / c))


# --------------------------------------------------------------------------- complexity


@dataclass(frozen=True)
class ComplexityWeights:
    constant: int = 1
    t: int = 1
    u: int = 2
    du: int = 6
    ddu: int = 10
    operator: int = 1


def complexity(e: OdeExpr | Node, w: ComplexityWeights = ComplexityWeights()) -> int:
    ast = e.ast if isinstance(e, OdeExpr) else e
    total = 0
    for n in walk(ast):
        if isinstance(n, (Num, Param)):
            total += w.constant
        elif isinstance(n, Sym):
            total += getattr(w, n.name)
        else:
            total += w.operator
    return total


# --------------------------------------------------------------------------- triviality


@dataclass(frozen=True)
class Probe:
    name: str
    u: Callable
    du: Callable
    ddu: Callable


DEFAULT_PROBES: tuple[Probe, ...] = (
    Probe("t", lambda t: t, lambda t: np.ones_like(t), lambda t: np.zeros_like(t)),
    Probe("-2.5t", lambda t: -2.5 * t, lambda t: np.full_like(t, -2.5), lambda t: np.zeros_like(t)),
    Probe("sin(3t)", lambda t: np.sin(3 * t), lambda t: 3 * np.cos(3 * t), lambda t: -9 * np.sin(3 * t)),
    Probe(
        "2cos(t/4)+t/3",
        lambda t: 2 * np.cos(t / 4) + t / 3,
        lambda t: -0.5 * np.sin(t / 4) + 1.0 / 3.0,
        lambda t: -0.125 * np.cos(t / 4),
    ),
)
PROBE_GRID = np.linspace(0.1, 10.0, 100)
TRIVIAL_EPS = 1e-2


def additive_terms(n: Node) -> list[Node]:
    if isinstance(n, BinOp) and n.op in "+-":
        return additive_terms(n.left) + additive_terms(n.right)
    if isinstance(n, Neg):
        return additive_terms(n.arg)
    return [n]


def triviality_ratio(e: OdeExpr, probes: Sequence[Probe] = DEFAULT_PROBES, t_grid=PROBE_GRID,
                     force: Callable | None = None) -> float:
    """Mean probe residual relative to the mean summed magnitude of the additive terms."""
    terms = additive_terms(e.ast)
    res_means, scale_means = [], []
    for p in probes:
        t = np.asarray(t_grid, dtype=float)
        ch = (t, p.u(t), p.du(t), p.ddu(t))
        with np.errstate(all="ignore"):
            r = evaluate(e, *ch)
            if force is not None:
                r = r - force(t)
            mags = [np.abs(evaluate(OdeExpr.from_ast(term), *ch, constants=_consts_for(e))) for term in terms]
            if force is not None:
                mags.append(np.abs(force(t)))
            s = np.sum(mags, axis=0)
        ok = np.isfinite(r) & np.isfinite(s)
        if not ok.any():
            continue
        res_means.append(float(np.mean(np.abs(r[ok]))))
        scale_means.append(float(np.mean(s[ok])))
    if not res_means:
        return math.inf
    num, den = float(np.mean(res_means)), float(np.mean(scale_means))
    if den == 0.0:
        return 0.0
    return num / den


def _consts_for(e: OdeExpr) -> list[float]:
    vals = e.constants
    if any(v is None for v in vals):
        raise ArityError("expression has unbound constants")
    return vals


def is_trivial(e: OdeExpr, probes: Sequence[Probe] = DEFAULT_PROBES, eps: float = TRIVIAL_EPS,
               t_grid=PROBE_GRID, force: Callable | None = None) -> bool:
    """True when the residual nearly vanishes for every probe solution."""
    return triviality_ratio(e, probes, t_grid, force) <= eps

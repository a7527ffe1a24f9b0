"""Context-free grammars over rule sequences.

A grammar file has one stanza per nonterminal::

    expr -> term '*' expr | term   [optional probabilities as `[p]`]

Terminals are single-quoted, nonterminals are bare words.  Rules are numbered
from 1 in file order; the padding rule (``Nothing -> None``) is always the
last index and is not a member of the production set proper.
"""
from __future__ import annotations

import hashlib
import re
from functools import lru_cache
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

PADDING_LHS = "Nothing"
PADDING_RHS = "None"

DEFAULT_MAX_DEPTH = 30
DEFAULT_MAX_RETRIES = 100


class GrammarError(ValueError):
    pass


class GrammarSyntaxError(GrammarError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class NotInLanguageError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


class InvalidSequenceError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProductionRule:
    lhs: str
    rhs: tuple[str, ...]
    index: int
    is_padding: bool = False

    def __str__(self) -> str:
        return f"{self.lhs} -> {' '.join(self.rhs)}"


@dataclass(frozen=True)
class RuleSequence:
    """Padded rule-index sequence; ``indices`` always has length ``padded_length``."""

    indices: tuple[int, ...]
    logical_length: int

    @property
    def padded_length(self) -> int:
        return len(self.indices)

    @property
    def rules(self) -> tuple[int, ...]:
        return self.indices[: self.logical_length]

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class Grammar:
    nonterminals: frozenset[str]
    terminals: frozenset[str]
    start: str
    rules: tuple[ProductionRule, ...]
    n_max: int
    probabilities: tuple[float, ...] | None = None
    _by_lhs: dict = field(default=None, repr=False, compare=False, hash=False)
    _cache: dict = field(default=None, repr=False, compare=False, hash=False)

    def __post_init__(self):
        by_lhs: dict[str, list[ProductionRule]] = {}
        for r in self.rules:
            if not r.is_padding:
                by_lhs.setdefault(r.lhs, []).append(r)
        object.__setattr__(self, "_by_lhs", {k: tuple(v) for k, v in by_lhs.items()})
        object.__setattr__(self, "_cache", {})

    @property
    def n_rules(self) -> int:
        """|P̂|: production rules plus the padding rule."""
        return len(self.rules)

    @property
    def padding_index(self) -> int:
        return self.rules[-1].index

    def rule(self, index: int) -> ProductionRule:
        return self.rules[index - 1]

    def rules_for(self, lhs: str) -> tuple[ProductionRule, ...]:
        return self._by_lhs.get(lhs, ())

    def rule_probability(self, index: int) -> float:
        r = self.rule(index)
        if self.probabilities is not None:
            return self.probabilities[index - 1]
        return 1.0 / len(self.rules_for(r.lhs)) if not r.is_padding else 1.0

    def to_text(self) -> str:
        lines = []
        seen = []
        for r in self.rules:
            if r.lhs not in seen:
                seen.append(r.lhs)
        for lhs in seen:
            alts = []
            for r in self.rules:
                if r.lhs != lhs:
                    continue
                body = " ".join(
                    s if (s in self.nonterminals or r.is_padding) else f"'{s}'" for s in r.rhs
                )
                if self.probabilities is not None:
                    body += f" [{self.probabilities[r.index - 1]!r}]"
                alts.append(body)
            lines.append(f"{lhs} -> " + " | ".join(alts))
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def with_n_max(self, n_max: int) -> "Grammar":
        return Grammar(self.nonterminals, self.terminals, self.start, self.rules, n_max, self.probabilities)

    def tokenize(self, expr: str) -> list[str]:
        return tokenize(expr, self.terminals)


# --------------------------------------------------------------------------- loading

_ALT_PROB = re.compile(r"\[\s*([^\]]*)\s*\]\s*$")
_TOKEN = re.compile(r"'([^']*)'|([A-Za-z_][A-Za-z0-9_]*)|(\S)")


def _split_alternatives(body: str, lineno: int) -> list[str]:
    alts, buf, quoted = [], [], False
    for ch in body:
        if ch == "'":
            quoted = not quoted
        if ch == "|" and not quoted:
            alts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if quoted:
        raise GrammarSyntaxError(lineno, "unterminated quote")
    alts.append("".join(buf))
    return alts


def load_grammar(text: str, n_max: int) -> Grammar:
    """Parse grammar-file text. The padding rule is appended if the file lacks one."""
    if n_max < 1:
        raise GrammarError("n_max must be positive")
    stanzas: list[tuple[int, str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("|"):
            if not stanzas:
                raise GrammarSyntaxError(lineno, "continuation line before any rule")
            ln, lhs, body = stanzas[-1]
            stanzas[-1] = (ln, lhs, body + " " + line)
            continue
        if "->" not in line:
            raise GrammarSyntaxError(lineno, "expected 'LHS -> alternatives'")
        lhs, body = line.split("->", 1)
        lhs = lhs.strip()
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", lhs):
            raise GrammarSyntaxError(lineno, f"bad left-hand side {lhs!r}")
        stanzas.append((lineno, lhs, body))

    if not stanzas:
        raise GrammarError("grammar text defines no rules")

    defined: dict[str, int] = {}
    for lineno, lhs, _ in stanzas:
        if lhs in defined:
            raise GrammarSyntaxError(lineno, f"nonterminal {lhs!r} redefined (first at line {defined[lhs]})")
        defined[lhs] = lineno

    raw_rules: list[tuple[int, str, list[tuple[str, bool]], float | None, bool]] = []
    for lineno, lhs, body in stanzas:
        for alt in _split_alternatives(body, lineno):
            alt = alt.strip()
            prob = None
            m = _ALT_PROB.search(alt)
            if m:
                try:
                    prob = float(m.group(1))
                except ValueError:
                    raise GrammarSyntaxError(lineno, f"bad probability {m.group(1)!r}") from None
                if not 0.0 <= prob <= 1.0:
                    raise GrammarSyntaxError(lineno, f"probability {prob} outside [0, 1]")
                alt = alt[: m.start()].strip()
            if not alt:
                raise GrammarSyntaxError(lineno, f"empty alternative for {lhs!r}")
            if lhs == PADDING_LHS:
                if alt != PADDING_RHS:
                    raise GrammarSyntaxError(lineno, f"padding rule must read '{PADDING_LHS} -> {PADDING_RHS}'")
                raw_rules.append((lineno, lhs, [(PADDING_RHS, False)], prob, True))
                continue
            symbols: list[tuple[str, bool]] = []
            for tm in _TOKEN.finditer(alt):
                quoted, bare, other = tm.groups()
                if quoted is not None:
                    if quoted == "":
                        raise GrammarSyntaxError(lineno, "empty terminal ''")
                    symbols.append((quoted, True))
                elif bare is not None:
                    symbols.append((bare, False))
                else:
                    raise GrammarSyntaxError(lineno, f"unexpected character {other!r}")
            raw_rules.append((lineno, lhs, symbols, prob, False))

    nonterminals = {lhs for _, lhs, _ in stanzas if lhs != PADDING_LHS}
    terminals: set[str] = set()
    for lineno, lhs, symbols, _, pad in raw_rules:
        if pad:
            continue
        for sym, is_term in symbols:
            if is_term:
                terminals.add(sym)
            elif sym not in nonterminals:
                raise GrammarSyntaxError(lineno, f"undefined nonterminal {sym!r}")
    clash = terminals & nonterminals
    if clash:
        raise GrammarError(f"symbols are both terminal and nonterminal: {sorted(clash)}")

    pads = [r for r in raw_rules if r[4]]
    body_rules = [r for r in raw_rules if not r[4]]
    if len(pads) > 1:
        raise GrammarError("more than one padding rule")

    probs_given = [r[3] is not None for r in body_rules]
    if any(probs_given) and not all(probs_given):
        raise GrammarError("either every alternative carries a probability or none does")

    rules: list[ProductionRule] = []
    probabilities: list[float] | None = [] if all(probs_given) else None
    for i, (_, lhs, symbols, prob, _) in enumerate(body_rules, start=1):
        rules.append(ProductionRule(lhs, tuple(s for s, _ in symbols), i))
        if probabilities is not None:
            probabilities.append(prob)
    rules.append(ProductionRule(PADDING_LHS, (PADDING_RHS,), len(rules) + 1, is_padding=True))
    if probabilities is not None:
        probabilities.append(1.0)
        sums: dict[str, float] = {}
        for r, p in zip(rules, probabilities):
            if not r.is_padding:
                sums[r.lhs] = sums.get(r.lhs, 0.0) + p
        for lhs, s in sums.items():
            if abs(s - 1.0) > 1e-9:
                raise GrammarError(f"probabilities for {lhs!r} sum to {s!r}, not 1 (line {defined[lhs]})")

    start = stanzas[0][1]
    if start == PADDING_LHS:
        raise GrammarError("padding rule cannot be the start symbol")
    return Grammar(
        nonterminals=frozenset(nonterminals),
        terminals=frozenset(terminals),
        start=start,
        rules=tuple(rules),
        n_max=n_max,
        probabilities=tuple(probabilities) if probabilities is not None else None,
    )


BUILTIN_GRAMMARS = {
    "toy": ("toy.cfg", 8),
    "bench1": ("bench1.cfg", 40),
    "bench2_pcfg": ("bench2_pcfg.cfg", 50),
    "bench2_gvae": ("bench2_gvae.cfg", 70),
    "bench3_pcfg": ("bench3_pcfg.cfg", 40),
    "bench3_gvae": ("bench3_gvae.cfg", 65),
}


def builtin_grammar(name: str, n_max: int | None = None) -> Grammar:
    """Grammars shipped with the package (toy example and the three benchmark pairs)."""
    try:
        fname, default_n = BUILTIN_GRAMMARS[name]
    except KeyError:
        raise GrammarError(f"unknown builtin grammar {name!r}; choose from {sorted(BUILTIN_GRAMMARS)}") from None
    text = resources.files("grammar_ode.grammars").joinpath(fname).read_text(encoding="utf-8")
    return load_grammar(text, n_max or default_n)


def load_grammar_file(path_or_name: str, n_max: int | None = None) -> Grammar:
    if path_or_name in BUILTIN_GRAMMARS:
        return builtin_grammar(path_or_name, n_max)
    with open(path_or_name, encoding="utf-8") as fh:
        text = fh.read()
    if n_max is None:
        raise GrammarError("n_max is required for grammar files")
    return load_grammar(text, n_max)


# --------------------------------------------------------------------------- lexing


@lru_cache(maxsize=64)
def _lexer(terminals: frozenset[str]) -> re.Pattern:
    alternatives = sorted(terminals, key=lambda s: (-len(s), s))  # longest match first
    return re.compile(r"\s*(" + "|".join(map(re.escape, alternatives)) + ")")


def tokenize(expr: str, terminals: Iterable[str]) -> list[str]:
    """Whitespace-insensitive longest-match lexer over the grammar's terminal alphabet."""
    lex = _lexer(frozenset(terminals))
    out: list[str] = []
    i, n = 0, len(expr)
    while i < n:
        m = lex.match(expr, i)
        if m is None:
            rest = expr[i:].lstrip()
            if not rest:
                break
            j = n - len(rest)
            raise NotInLanguageError(f"cannot tokenize {rest[:10]!r} at offset {j}")
        out.append(m.group(1))
        i = m.end()
    return out


# --------------------------------------------------------------------------- parsing


def _earley_spans(g: Grammar, tokens: Sequence[str]) -> set[tuple[str, int, int]]:
    """Earley recognition; returns every (nonterminal, i, j) with A =>* tokens[i:j]."""
    if "earley" not in g._cache:
        g._cache["earley"] = (
            {r.index: r.rhs for r in g.rules},
            {r.index: r.lhs for r in g.rules},
            {a: tuple(r.index for r in g.rules_for(a)) for a in g.nonterminals},
        )
    rhs_of, lhs_of, alts = g._cache["earley"]
    nts = g.nonterminals
    n = len(tokens)
    chart: list[dict[tuple[int, int, int], None]] = [dict() for _ in range(n + 1)]
    waiting: list[dict[str, list[tuple[int, int, int]]]] = [dict() for _ in range(n + 1)]
    completed: set[tuple[str, int, int]] = set()

    for ridx in alts[g.start]:
        chart[0][(ridx, 0, 0)] = None
    for k in range(n + 1):
        items, wait = chart[k], waiting[k]
        tok = tokens[k] if k < n else None
        agenda = list(items)
        predicted: set[str] = set()
        pos = 0
        while pos < len(agenda):
            item = agenda[pos]
            pos += 1
            ridx, dot, origin = item
            rhs = rhs_of[ridx]
            if dot == len(rhs):
                lhs = lhs_of[ridx]
                completed.add((lhs, origin, k))
                for pidx, pdot, porigin in tuple(waiting[origin].get(lhs, ())):
                    new = (pidx, pdot + 1, porigin)
                    if new not in items:
                        items[new] = None
                        agenda.append(new)
                continue
            sym = rhs[dot]
            if sym in nts:
                wait.setdefault(sym, []).append(item)
                if sym not in predicted:
                    predicted.add(sym)
                    for r in alts[sym]:
                        new = (r, 0, k)
                        if new not in items:
                            items[new] = None
                            agenda.append(new)
            elif sym == tok:
                chart[k + 1][(ridx, dot + 1, origin)] = None
    return completed


def parse(g: Grammar, expr: str | Sequence[str]) -> RuleSequence:
    """Leftmost-derivation rule sequence of ``expr``, padded to ``g.n_max``.

    Ambiguity is resolved by taking the lexicographically smallest rule sequence,
    i.e. the lowest rule index at every choice point.
    """
    tokens = g.tokenize(expr) if isinstance(expr, str) else list(expr)
    if not tokens:
        raise NotInLanguageError("empty expression")
    spans = _earley_spans(g, tokens)
    n = len(tokens)
    if (g.start, 0, n) not in spans:
        raise NotInLanguageError(f"{' '.join(tokens)!r} is not in the language")

    memo: dict[tuple[str, int, int], tuple[int, ...] | None] = {}
    active: set[tuple[str, int, int]] = set()

    def best(sym: str, i: int, j: int) -> tuple[int, ...] | None:
        if sym not in g.nonterminals:
            return () if (j == i + 1 and tokens[i] == sym) else None
        key = (sym, i, j)
        if key not in spans:
            return None
        if key in memo:
            return memo[key]
        if key in active:
            return None
        active.add(key)
        result = None
        for r in g.rules_for(sym):
            tail = match(r.rhs, 0, i, j)
            if tail is not None:
                cand = (r.index,) + tail
                if result is None or cand < result:
                    result = cand
            if result is not None:
                break
        active.discard(key)
        memo[key] = result
        return result

    def match(rhs: tuple[str, ...], k: int, i: int, j: int) -> tuple[int, ...] | None:
        remaining = len(rhs) - k
        if remaining == 0:
            return () if i == j else None
        if j - i < remaining:
            return None
        sym = rhs[k]
        if remaining == 1:
            return best(sym, i, j)
        out = None
        ends = [i + 1] if sym not in g.nonterminals else range(i + 1, j - remaining + 2)
        for m in ends:
            head = best(sym, i, m)
            if head is None:
                continue
            rest = match(rhs, k + 1, m, j)
            if rest is None:
                continue
            cand = head + rest
            if out is None or cand < out:
                out = cand
        return out

    seq = best(g.start, 0, n)
    if seq is None:
        raise NotInLanguageError(f"{' '.join(tokens)!r} is not in the language")
    return pad(g, seq)


def pad(g: Grammar, rules: Sequence[int]) -> RuleSequence:
    rules = tuple(int(r) for r in rules)
    if len(rules) > g.n_max:
        raise SequenceLengthError(f"derivation needs {len(rules)} rules, N_max is {g.n_max}")
    return RuleSequence(rules + (g.padding_index,) * (g.n_max - len(rules)), len(rules))


def _replay(g: Grammar, indices: Sequence[int]) -> tuple[list[str], int]:
    """Leftmost derivation replay. Returns (terminal tokens, logical length)."""
    stack: list[str] = [g.start]
    out: list[str] = []
    used = 0
    pad_idx = g.padding_index

    def flush() -> None:
        while stack and stack[-1] not in g.nonterminals:
            out.append(stack.pop())

    for pos, idx in enumerate(indices):
        flush()
        if idx == pad_idx:
            if stack:
                raise InvalidSequenceError(f"padding at position {pos} with {stack[-1]!r} unexpanded")
            continue
        if not 1 <= idx < pad_idx:
            raise InvalidSequenceError(f"rule index {idx} out of range")
        if not stack:
            raise InvalidSequenceError(f"rule {idx} at position {pos} after derivation completed")
        r = g.rule(idx)
        if r.lhs != stack[-1]:
            raise InvalidSequenceError(f"rule {idx} ({r.lhs}) applied to {stack[-1]!r} at position {pos}")
        stack.pop()
        stack.extend(reversed(r.rhs))
        used = pos + 1
    flush()
    if stack:
        raise InvalidSequenceError(f"sequence exhausted with {stack[-1]!r} unexpanded")
    return out, used


def generate_tokens(g: Grammar, seq: RuleSequence | Sequence[int]) -> list[str]:
    indices = seq.indices if isinstance(seq, RuleSequence) else seq
    return _replay(g, indices)[0]


def generate(g: Grammar, seq: RuleSequence | Sequence[int]) -> str:
    """Terminal string of the leftmost derivation, tokens separated by single spaces."""
    return " ".join(generate_tokens(g, seq))


def is_valid(g: Grammar, seq: RuleSequence | Sequence[int]) -> bool:
    try:
        generate_tokens(g, seq)
    except InvalidSequenceError:
        return False
    return True


def valid_rule_mask(g: Grammar, stack_top: str | None) -> np.ndarray:
    """Rules applicable to ``stack_top``; an empty stack admits only padding."""
    mask = np.zeros(g.n_rules, dtype=bool)
    if stack_top is None:
        mask[g.padding_index - 1] = True
        return mask
    for r in g.rules_for(stack_top):
        mask[r.index - 1] = True
    return mask


def mask_table(g: Grammar) -> tuple[list[str], np.ndarray]:
    """Per-nonterminal masks; the extra last row is the empty-stack mask."""
    symbols = sorted(g.nonterminals)
    table = np.stack([valid_rule_mask(g, s) for s in symbols] + [valid_rule_mask(g, None)])
    return symbols, table


def sequence_masks(g: Grammar, seq: RuleSequence | Sequence[int]) -> np.ndarray:
    """Mask at each step of the replay of a valid sequence (N × |P̂|)."""
    indices = seq.indices if isinstance(seq, RuleSequence) else list(seq)
    stack: list[str] = [g.start]
    masks = np.zeros((len(indices), g.n_rules), dtype=bool)
    for pos, idx in enumerate(indices):
        while stack and stack[-1] not in g.nonterminals:
            stack.pop()
        top = stack[-1] if stack else None
        masks[pos] = valid_rule_mask(g, top)
        if not masks[pos, idx - 1]:
            raise InvalidSequenceError(f"rule {idx} not admissible at position {pos}")
        if top is not None:
            stack.pop()
            stack.extend(reversed(g.rule(idx).rhs))
    return masks


# --------------------------------------------------------------------------- sampling


def _choice_tables(g: Grammar) -> dict[str, tuple[tuple[ProductionRule, ...], np.ndarray]]:
    if "choice" in g._cache:
        return g._cache["choice"]
    tables = {}
    for sym in g.nonterminals:
        alts = g.rules_for(sym)
        p = np.array([g.rule_probability(r.index) for r in alts])
        cdf = np.cumsum(p / p.sum())
        cdf[-1] = 1.0
        tables[sym] = (alts, cdf)
    g._cache["choice"] = tables
    return tables


def _sample_once(g: Grammar, rng: np.random.Generator, max_length: int, max_depth: int) -> list[int] | None:
    tables = _choice_tables(g)
    # stack entries: (symbol, depth)
    stack: list[tuple[str, int]] = [(g.start, 1)]
    out: list[int] = []
    while stack:
        sym, depth = stack.pop()
        if sym not in tables:
            continue
        if depth > max_depth or len(out) >= max_length:
            return None
        alts, cdf = tables[sym]
        r = alts[int(np.searchsorted(cdf, rng.random(), side="right"))]
        out.append(r.index)
        for s in reversed(r.rhs):
            if s in tables:
                stack.append((s, depth + 1))
    return out


def sample(
    g: Grammar,
    rng_seed: int | np.random.Generator,
    max_length: int | None = None,
    max_depth: int = DEFAULT_MAX_DEPTH,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> RuleSequence:
    """Top-down leftmost sample; rules drawn with their probabilities (uniform if absent)."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    limit = min(max_length or g.n_max, g.n_max)
    for _ in range(max_retries):
        rules = _sample_once(g, rng, limit, max_depth)
        if rules is not None:
            return pad(g, rules)
    raise SamplingError(f"no sample within length {limit} and depth {max_depth} after {max_retries} tries")


def sample_dataset(
    g: Grammar,
    size: int,
    seed: int,
    dedupe: bool = True,
    max_attempts_factor: int = 50,
) -> list[str]:
    """Draw ``size`` expressions; exact-string dedup when ``dedupe``."""
    rng = np.random.default_rng(seed)
    out: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(out) < size:
        attempts += 1
        if attempts > max(1, size) * max_attempts_factor:
            raise SamplingError(f"only {len(out)} unique expressions after {attempts} draws")
        s = generate(g, sample(g, rng))
        if dedupe:
            if s in seen:
                continue
            seen.add(s)
        out.append(s)
    return out


# --------------------------------------------------------------------------- one-hot


def encode_one_hot(g: Grammar, seq: RuleSequence) -> np.ndarray:
    m = np.zeros((len(seq.indices), g.n_rules), dtype=np.float64)
    m[np.arange(len(seq.indices)), np.asarray(seq.indices) - 1] = 1.0
    return m


def decode_one_hot(g: Grammar, m: np.ndarray, validate: bool = True) -> RuleSequence:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[1] != g.n_rules:
        raise ValueError(f"expected (N, {g.n_rules}) matrix, got {m.shape}")
    bad = np.flatnonzero((m.sum(axis=1) != 1) | ~np.all((m == 0) | (m == 1), axis=1))
    if bad.size:
        raise ValueError(f"one-hot row {int(bad[0])} does not contain exactly one 1")
    indices = tuple(int(i) + 1 for i in m.argmax(axis=1))
    if validate:
        _, used = _replay(g, indices)
        return RuleSequence(indices, used)
    n_r = next((k for k, i in enumerate(indices) if i == g.padding_index), len(indices))
    return RuleSequence(indices, n_r)


def one_hot_batch(g: Grammar, seqs: Sequence[RuleSequence]) -> np.ndarray:
    idx = np.array([s.indices for s in seqs], dtype=np.int64) - 1
    out = np.zeros(idx.shape + (g.n_rules,), dtype=np.float32)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out

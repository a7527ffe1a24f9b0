import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grammar_ode.grammar import builtin_grammar, generate, sample
from grammar_ode.symodes import (DegenerateError, InfeasibleError, InterpretError, MissingChannelError, OdeExpr,
                                 bind_constants, complexity, eval_residual, evaluate, from_json, interpret, is_trivial,
                                 l_de, normalize_highest_derivative, to_json, triviality_ratio)
from grammar_ode.trajectories import Trajectory, load_benchmarks


def test_complexity_of_worked_example():
    assert complexity(interpret("5*diff(u,t) + 25*u - sin(t)")) == 16


def test_complexity_small_cases():
    assert complexity(interpret("u")) == 2
    assert complexity(interpret("du")) == 6
    assert complexity(interpret("ddu")) == 10
    assert complexity(interpret("C*t")) == 3


def test_interpret_placeholders_and_order():
    e = interpret("C*du + C*u - C")
    assert e.order == 1
    assert e.n_constants == 3
    assert not e.is_bound
    b = bind_constants(e, [1.0, 0.5, 2.0])
    assert str(b) == "1*diff(u,t) + 0.5*u - 2"
    with pytest.raises(ValueError):
        bind_constants(e, [1.0])


def test_diff_notation():
    assert interpret("diff(diff(u,t),t) + u").order == 2
    with pytest.raises(InterpretError):
        interpret("diff(t, u)")
    with pytest.raises(InterpretError):
        interpret("sin(")


def test_evaluate_vectorized():
    e = interpret("ddu + 0.5*du + 2.5*u - sin(0.5*t)")
    t = np.linspace(0, 1, 11)
    got = evaluate(e, t, np.cos(t), -np.sin(t), -np.cos(t))
    want = -np.cos(t) - 0.5 * np.sin(t) + 2.5 * np.cos(t) - np.sin(0.5 * t)
    np.testing.assert_allclose(got, want, rtol=1e-14)


def test_residual_channel_errors():
    tr = Trajectory(t=np.linspace(0, 1, 5), u=np.ones(5))
    with pytest.raises(MissingChannelError):
        eval_residual(interpret("du + u"), tr)
    with pytest.raises(InfeasibleError):
        eval_residual(interpret("log(u - 1)"), tr)
    assert l_de(np.array([3.0, -3.0])) == 3.0


def test_normalization():
    e = interpret("2*ddu + du + 5*u - 2*sin(0.5*t)")
    n = normalize_highest_derivative(e)
    assert str(n) == "diff(diff(u,t),t) + 0.5*diff(u,t) + 2.5*u - sin(0.5*t)"
    assert normalize_highest_derivative(n) == n
    with pytest.raises(DegenerateError):
        normalize_highest_derivative(interpret("0*ddu + du"))


def test_normalization_scales_residual():
    e = interpret("-3*du*u + u^2 - t")
    n = normalize_highest_derivative(e)
    t = np.linspace(0.2, 2, 9)
    u, du = np.exp(-t), -np.exp(-t)
    np.testing.assert_allclose(evaluate(n, t, u, du), evaluate(e, t, u, du) / -3.0, rtol=1e-12)


def test_trivial_examples_flagged():
    assert is_trivial(interpret("du + 2 - du - 2"))
    assert is_trivial(interpret("sin(u)^2 + cos(u)^2 - 1"))


def test_ground_truths_not_trivial():
    for p in load_benchmarks():
        assert not is_trivial(p.residual_expr, force=None), p.name


def test_triviality_is_scale_invariant():
    e = interpret("du + 0.5*u - 2")
    r1 = triviality_ratio(e)
    r2 = triviality_ratio(interpret("1000*du + 500*u - 2000"))
    assert math.isclose(r1, r2, rel_tol=1e-9)


def test_json_round_trip():
    e = bind_constants(interpret("C*ddu + C*du^2 - exp(-t)*C"), [1.5, -2.0, 0.25])
    assert from_json(to_json(e)) == e


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_render_round_trip_on_grammar_samples(seed):
    g = builtin_grammar("bench2_pcfg")
    e = interpret(generate(g, sample(g, seed)), g)
    rng = np.random.default_rng(seed)
    b = bind_constants(e, rng.uniform(-3, 3, e.n_constants))
    again = interpret(str(b))  # bound constants come back as plain numbers
    assert str(again) == str(b)
    t = np.linspace(0.5, 2.0, 7)
    with np.errstate(all="ignore"):
        x, y = evaluate(again, t, np.cos(t), -np.sin(t), -np.cos(t)), evaluate(b, t, np.cos(t), -np.sin(t), -np.cos(t))
    np.testing.assert_array_equal(x, y)

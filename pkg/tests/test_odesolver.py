import numpy as np
import pytest

from grammar_ode.odesolver import HighestDerivative, IvpSpec, SolveError, degree, solve_ivp, to_first_order
from grammar_ode.symodes import eval_residual, interpret, l_de
from grammar_ode.trajectories import get_benchmark, load_benchmarks, relative_l2, solve_ground_truth


def test_exponential_decay():
    t = np.linspace(0, 5, 51)
    tr = solve_ivp(IvpSpec(interpret("du + u"), [1.0], t))
    np.testing.assert_allclose(tr.u, np.exp(-t), rtol=1e-6)
    np.testing.assert_allclose(tr.du, -np.exp(-t), rtol=1e-6)
    assert tr.provenance == "numeric-solve"


def test_pendulum_plug_back():
    p = get_benchmark("pendulum")
    tr = solve_ivp(IvpSpec(p.operator_expr, p.initial_values, p.t_grid, force=p.force_fn()))
    r = eval_residual(p.operator_expr, tr, force=p.force_series())
    assert l_de(r) < 1e-5


def test_nlode4_follows_oscillating_branch():
    p = get_benchmark("NLODE4")
    tr = solve_ivp(IvpSpec(p.operator_expr, p.initial_values, p.t_grid, rtol=1e-10, atol=1e-10))
    assert l_de(eval_residual(p.operator_expr, tr)) < 1e-4
    np.testing.assert_allclose(tr.ddu, -3 * tr.u, atol=1e-6)


@pytest.mark.parametrize("name", ["LODE1", "LODE2", "LODE3", "LODE4", "LODE5"])
def test_linear_odes_match_closed_forms(name):
    p = get_benchmark(name)
    exact = solve_ground_truth(p)
    num = solve_ivp(IvpSpec(p.operator_expr, p.initial_values, p.t_grid, rtol=1e-10, atol=1e-12))
    assert relative_l2(exact.u, num.u) < 1e-6


def test_companion_form_eigen_dynamics():
    # 2u'' + u' + 5u = 0 -> eigenvalues of [[0, 1], [-2.5, -0.5]]
    e = interpret("2*ddu + du + 5*u")
    f, _ = to_first_order(IvpSpec(e, [1.0, 0.0], np.linspace(0, 1, 3)))
    A = np.column_stack([f(0.0, np.array([1.0, 0.0])), f(0.0, np.array([0.0, 1.0]))])
    np.testing.assert_allclose(A, [[0, 1], [-2.5, -0.5]], atol=1e-14)
    t = np.linspace(0, 10, 101)
    tr = solve_ivp(IvpSpec(e, [1.0, 0.0], t, rtol=1e-10, atol=1e-12))
    lam, V = np.linalg.eig(A)
    c = np.linalg.solve(V, [1.0, 0.0])
    exact = np.real((V @ (c[:, None] * np.exp(np.outer(lam, t))))[0])
    np.testing.assert_allclose(tr.u, exact, atol=1e-7)


def test_first_order_lift_and_order_zero():
    e = interpret("du - u")
    f, _ = to_first_order(IvpSpec(e, [2.0], np.linspace(0, 1, 3)))
    assert f(0.0, np.array([2.0]))[0] == pytest.approx(2.0)
    with pytest.raises(ValueError):
        to_first_order(IvpSpec(interpret("u - t"), [], np.linspace(0, 1, 3)))


def test_blow_up_reported_with_time():
    with pytest.raises(SolveError) as info:
        solve_ivp(IvpSpec(interpret("du - u^2"), [1.0], np.linspace(0, 2, 21)))
    assert info.value.reason == "blow-up"
    assert 0.9 < info.value.t_fail <= 1.0


def test_singular_coefficient_fails():
    with pytest.raises(SolveError):
        solve_ivp(IvpSpec(interpret("t*du - u"), [1.0], np.linspace(0, 1, 5)))


def test_nonaffine_isolation_uses_root_finding():
    e = interpret("du^3 + du - u")
    assert degree(e.ast, "du") == 3
    h = HighestDerivative(e, 1)
    assert not h.affine
    v = h(0.0, [2.0])
    assert v ** 3 + v - 2.0 == pytest.approx(0.0, abs=1e-12)


def test_plug_back_over_suite():
    for p in load_benchmarks((1, 3)):
        tr = solve_ivp(IvpSpec(p.operator_expr, p.initial_values, p.t_grid, force=p.force_fn(),
                               rtol=1e-8, atol=1e-8, max_steps=500_000, blow_up=1e8))
        r = eval_residual(p.operator_expr, tr, force=p.force_series())
        scale = max(1.0, float(np.sqrt(np.mean(tr.du ** 2))))
        assert l_de(r) < 100 * 1e-8 * scale * 10, p.name

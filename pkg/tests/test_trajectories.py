import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grammar_ode.trajectories import (BenchmarkProblem, Trajectory, add_noise, floor_error, get_benchmark,
                                      load_benchmarks, relative_l2, solve_ground_truth)


def test_suite_sizes():
    assert [len(load_benchmarks(s)) for s in (1, 2, 3)] == [30, 10, 3]
    names = [p.name for p in load_benchmarks()]
    assert len(set(names)) == 43


def test_unknown_benchmark_lists_ids():
    with pytest.raises(KeyError, match="LODE1"):
        get_benchmark("LODE99")


def test_lode1_grid_and_closed_form():
    p = get_benchmark("LODE1")
    tr = solve_ground_truth(p)
    assert tr.n_s == 46
    want = 4 + 16.1 * np.exp(-(tr.t - 0.1) / 2)
    np.testing.assert_allclose(tr.u, want, rtol=1e-8)
    num = solve_ground_truth(p, prefer_closed_form=False)
    assert relative_l2(want, num.u) < 1e-8


def test_id11_decays_monotonically():
    tr = solve_ground_truth(get_benchmark("ID11"))
    assert np.all(np.diff(tr.u) < 0)


def test_pendulum_grid():
    tr = solve_ground_truth(get_benchmark("pendulum"))
    assert tr.n_s == 601
    assert tr.t[0] == 0 and tr.t[-1] == pytest.approx(60)
    assert tr.u[0] == 0 and tr.du[0] == 3


def test_every_problem_solves_and_round_trips(tmp_path):
    for p in load_benchmarks():
        tr = solve_ground_truth(p)
        assert np.all(np.isfinite(tr.u)), p.name
        assert len(p.initial_values) == p.order
        q = BenchmarkProblem.from_dict(p.to_dict())
        assert q == p
    path = tmp_path / "lode3.csv"
    tr = solve_ground_truth(get_benchmark("LODE3"))
    tr.to_csv(path)
    back = Trajectory.from_csv(path)
    np.testing.assert_array_equal(back.u, tr.u)
    np.testing.assert_array_equal(back.ddu, tr.ddu)
    assert back.provenance == tr.provenance


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory(t=np.array([0.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        Trajectory(t=np.linspace(0, 1, 4), u=np.ones(3))


def test_noise_level_and_determinism():
    t = np.linspace(0, 10, 400)
    tr = Trajectory(t=t, u=np.sin(t) + 2)
    assert add_noise(tr, 0.0, 1) is tr
    a, b = add_noise(tr, 0.05, 7), add_noise(tr, 0.05, 7)
    np.testing.assert_array_equal(a.u, b.u)
    ratio = np.sqrt(np.mean((a.u - tr.u) ** 2)) / np.sqrt(np.mean(tr.u ** 2))
    assert 0.04 <= ratio <= 0.06
    assert a.t is tr.t or np.array_equal(a.t, tr.t)
    assert a.provenance == "noisy-observation"


def test_relative_l2_examples():
    x = np.array([1.0, -2.0, 3.0])
    assert relative_l2(x, x) == 0.0
    assert floor_error(relative_l2(x, 2 * x)) == 1.0
    assert relative_l2(x, np.zeros(3)) == 1.0
    assert floor_error(float("nan")) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30), st.floats(1e-3, 1e3))
def test_relative_l2_scale_invariant(vals, k):
    x = np.array(vals)
    y = x[::-1] + 0.5
    if np.linalg.norm(x) == 0:
        return
    assert relative_l2(x, y) >= 0
    assert np.isclose(relative_l2(k * x, k * y), relative_l2(x, y), rtol=1e-9)

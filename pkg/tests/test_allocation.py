import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oambandit.allocation import (
    AllocationProblem,
    InfeasibleAllocation,
    certify,
    constraint_gradient,
    constraint_value,
    exploration_threshold,
    lower_bound_constant,
    solve_allocation,
)
from oambandit.harness import builtin_scenario
from oambandit.instance import BanditInstance

from helpers import grid_search_2d

# high-precision evaluation of the threshold formula, frozen
THRESHOLD_1E4 = 32.074576691663540
# analytic optimum is T = (cap, 0, 200) with cost 20; the grid lands on or just above it
FIXED_U_OPTIMUM = 20.0
GRID_STEP = 0.5


def threshold_oracle(n, delta, d, c):
    mpmath.mp.dps = 50
    ln_n = mpmath.log(n)
    return float(2 * (1 + 1 / ln_n) * mpmath.log(1 / mpmath.mpf(delta)) + c * d * mpmath.log(d * ln_n))


def test_threshold_at_e():
    assert exploration_threshold(math.e, math.exp(-1), 1, 2) == pytest.approx(4.0, rel=1e-15)


def test_threshold_delta_one():
    val = exploration_threshold(1000, 1.0, 3, 2)
    assert val == pytest.approx(2 * 3 * math.log(3 * math.log(1000)), rel=1e-15)


def test_threshold_high_precision():
    assert threshold_oracle(10**4, 1e-4, 2, 2) == pytest.approx(THRESHOLD_1E4, rel=1e-15)
    assert exploration_threshold(10**4, 1e-4, 2, 2) == pytest.approx(THRESHOLD_1E4, rel=1e-13)


@pytest.mark.parametrize("n,delta", [(1, 0.5), (100, 0.0), (100, 1.5)])
def test_threshold_domain(n, delta):
    with pytest.raises(ValueError):
        exploration_threshold(n, delta, 2, 2)


def test_constraint_value_examples(rng):
    E = np.eye(2)
    assert constraint_value([2, 2], E, [1, 0]) == pytest.approx(0.5)
    assert constraint_value([6, 6], E, [1, 0]) == pytest.approx(0.5 / 3)
    arms = rng.standard_normal((3, 3))
    w = rng.uniform(0.5, 2, 3)
    x = rng.standard_normal(3)
    H = sum(wi * np.outer(a, a) for wi, a in zip(w, arms))
    oracle = x @ np.linalg.solve(H, x)
    assert abs(constraint_value(w, arms, x) - oracle) / oracle <= 1e-10


def test_constraint_value_singular():
    with pytest.raises(np.linalg.LinAlgError):
        constraint_value([1, 0], np.eye(2), [1, 0])


def test_gradient_basis_example():
    np.testing.assert_allclose(constraint_gradient([1, 1], np.eye(2), [1, 0]), [-1, 0])


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 5))
        K = int(rng.integers(d, 7))
        arms = rng.uniform(-1, 1, (K, d))
        w = rng.uniform(0.5, 3.0, K)
        x = rng.uniform(-1, 1, d)
        g = constraint_gradient(w, arms, x)
        assert np.all(g <= 0)
        h = 1e-5
        fd = np.array([
            (constraint_value(w + h * e, arms, x) - constraint_value(w - h * e, arms, x)) / (2 * h)
            for e in np.eye(K)
        ])
        worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12))
    assert worst <= 1e-4


def test_one_variable_closed_form():
    p = AllocationProblem(np.eye(2), [0.0, 1.0], 2.0, cap=1e6)
    sol = solve_allocation(p)
    assert sol.converged
    assert sol.weights[1] == pytest.approx(2.0, rel=1e-5)
    assert sol.objective == pytest.approx(2.0, rel=1e-5)
    assert sol.weights[0] == 1e6 and sol.saturated.tolist() == [True, False]


def test_all_zero_gaps():
    p = AllocationProblem(np.eye(2), [0.0, 0.0], 2.0)
    sol = solve_allocation(p)
    assert sol.objective == 0.0 and sol.converged
    assert np.all(sol.weights == p.cap)


def test_rank_deficient_rejected():
    p = AllocationProblem(np.array([[1.0, 0.0], [2.0, 0.0]]), [0.0, 1.0], 2.0)
    with pytest.raises(InfeasibleAllocation):
        solve_allocation(p)


def test_fixed_u_matches_grid_search(fixed_u):
    p = AllocationProblem(fixed_u.contexts[0].arms, fixed_u.gaps(0), 2.0)
    grid = grid_search_2d(p, step=GRID_STEP)
    assert FIXED_U_OPTIMUM <= grid <= FIXED_U_OPTIMUM + GRID_STEP * 0.1 + 1e-9
    sol = solve_allocation(p)
    assert sol.converged
    assert abs(sol.objective - grid) / grid <= 0.02
    assert sol.objective == pytest.approx(FIXED_U_OPTIMUM, rel=1e-5)


def test_warm_start_reaches_same_optimum(fixed_u):
    p = AllocationProblem(fixed_u.contexts[0].arms, fixed_u.gaps(0), 2.0)
    cold = solve_allocation(p)
    warm = solve_allocation(p, warm_start=cold.weights * 1.5)
    assert warm.objective == pytest.approx(cold.objective, rel=1e-5)


def test_budget_exhaustion_reports_not_converged(fixed_u):
    p = AllocationProblem(fixed_u.contexts[0].arms, fixed_u.gaps(0), 2.0)
    sol = solve_allocation(p, max_outer=2, max_inner=2)
    assert not sol.converged
    assert np.all(sol.weights > 0)


def random_problem(seed, d=2, k=2):
    rng = np.random.default_rng(seed)
    arms = np.vstack([np.eye(d)[0], rng.uniform(-1, 1, (k, d))])
    arms /= np.maximum(np.linalg.norm(arms, axis=1, keepdims=True), 1.0)
    gaps = np.concatenate([[0.0], rng.uniform(0.3, 1.0, k)])
    return AllocationProblem(arms, gaps, 2.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 2))
def test_random_instances_match_grid(seed, k):
    p = random_problem(seed, 2, k)
    assume(np.linalg.matrix_rank(p.arms) == 2)
    sol = solve_allocation(p)
    assert sol.converged
    # only compare when the optimum lies inside the grid box
    assume(np.all(sol.weights[p.constrained] <= 390))
    grid = grid_search_2d(p, step=GRID_STEP)
    assert sol.objective <= grid * 1.02
    # the grid can only lose up to one step per variable
    assert grid - sol.objective <= GRID_STEP * p.gaps[p.constrained].sum() + 1e-9
    if np.all(sol.weights[p.constrained] >= 50):
        assert abs(sol.objective - grid) / grid <= 0.02


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 4), k=st.integers(1, 4))
def test_solution_certificate_and_history(seed, d, k):
    p = random_problem(seed, d, k)
    assume(np.linalg.matrix_rank(p.arms) == d)
    sol = solve_allocation(p)
    assert np.all(sol.weights >= 0)
    assert np.linalg.eigvalsh(p.arms.T @ (sol.weights[:, None] * p.arms)).min() > 0
    if sol.converged:
        assert certify(p, sol.weights) <= 1e-6
        X = p.arms[p.constrained]
        vals = np.array([constraint_value(sol.weights, p.arms, x) for x in X])
        assert np.all(vals <= p.rhs() * (1 + 1e-6))
    hist = np.array(sol.history)
    assert np.all(np.diff(hist) <= 1e-9 * np.maximum(hist[:-1], 1.0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 4))
def test_constraint_is_convex_in_weights(seed, d):
    rng = np.random.default_rng(seed)
    arms = rng.uniform(-1, 1, (d + 2, d))
    x = rng.uniform(-1, 1, d)
    T1, T2 = rng.uniform(0.1, 5, (2, d + 2))
    mid = constraint_value((T1 + T2) / 2, arms, x)
    assert mid <= (constraint_value(T1, arms, x) + constraint_value(T2, arms, x)) / 2 + 1e-9


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.2, 5.0))
def test_scale_covariance(seed, scale):
    p = random_problem(seed, 2, 2)
    assume(np.linalg.matrix_rank(p.arms) == 2)
    base = solve_allocation(p)
    q = AllocationProblem(p.arms, p.gaps * scale, p.threshold, cap=p.cap / scale**2)
    scaled = solve_allocation(q)
    assert base.converged and scaled.converged
    assert scaled.objective == pytest.approx(base.objective / scale, rel=1e-4)
    idx = p.constrained
    np.testing.assert_allclose(scaled.weights[idx], base.weights[idx] / scale**2, rtol=1e-3, atol=1e-4 * base.weights[idx].max())


def test_lower_bound_mab_d2():
    inst = BanditInstance.from_arrays([1.0, 0.0], [np.eye(2)])
    assert lower_bound_constant(inst) == pytest.approx(2.0, rel=1e-4)


def test_lower_bound_mab_d3():
    inst = BanditInstance.from_arrays([1.0, 0.8, 0.5], [np.eye(3)])
    assert lower_bound_constant(inst) == pytest.approx(14.0, rel=0.01)


def test_lower_bound_span_case():
    assert lower_bound_constant(builtin_scenario("span-bounded")) <= 1e-3


def test_lower_bound_rejects_tied_distinct_optima():
    inst = BanditInstance.from_arrays([1.0, 1.0], [np.eye(2)])
    with pytest.raises(ValueError):
        lower_bound_constant(inst)

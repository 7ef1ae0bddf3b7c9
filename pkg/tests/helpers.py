"""Shared oracles and experiment drivers for the test suite."""

import numpy as np

from oambandit.allocation import exploration_threshold
from oambandit.estimator import LeastSquaresState


def coverage_violation_rate(instance, runs=500, rounds=200, delta=0.05, seed=0, c=2.0):
    """Fraction of (run, arm) events where the final-round estimate leaves its confidence band."""
    arms = instance.contexts[0].arms
    f = exploration_threshold(rounds, delta, instance.d, c)
    rng = np.random.default_rng(seed)
    violations = events = 0
    for _ in range(runs):
        ls = LeastSquaresState(instance.d)
        picks = rng.integers(len(arms), size=rounds)
        noise = rng.standard_normal(rounds)
        for k, eta in zip(picks, noise):
            ls.absorb(arms[k], arms[k] @ instance.theta + eta)
        err = np.abs(arms @ (ls.theta_hat - instance.theta))
        width = np.sqrt(ls.weighted_norms_sq(arms) * f)
        violations += int(np.sum(err > width))
        events += len(arms)
    return violations / events


def grid_search_2d(problem, step=0.5, hi=400.0):
    """Exhaustive search for d=2 programs with at most two constrained arms.

    Zero-gap arms sit at the cap; constrained arms range over a grid on
    ``[0, hi]``. Returns the smallest feasible objective on the grid.
    """
    arms = problem.arms
    idx = problem.constrained
    assert arms.shape[1] == 2 and 1 <= idx.size <= 2
    grid = np.arange(0.0, hi + step / 2, step)
    axes = np.meshgrid(*([grid] * idx.size), indexing="ij")
    W = np.stack([a.ravel() for a in axes], axis=1)
    base = np.zeros((2, 2))
    for j in np.flatnonzero(problem.gaps == 0):
        base += problem.cap * np.outer(arms[j], arms[j])
    H = base[None] + np.einsum("gk,kij->gij", W, np.stack([np.outer(arms[j], arms[j]) for j in idx]))
    a, b, d = H[:, 0, 0], H[:, 0, 1], H[:, 1, 1]
    det = a * d - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = det > 0
        for j, r in zip(idx, problem.rhs()):
            x = arms[j]
            q = (d * x[0] ** 2 - 2 * b * x[0] * x[1] + a * x[1] ** 2) / det
            ok &= q <= r
    cost = W @ problem.gaps[idx]
    return float(cost[ok].min())

"""Allocation program: how often each arm must be played to certify its gap.

Minimise ``sum_x T_x * gap_x`` subject to ``x^T H_T^{-1} x <= gap_x^2 / threshold``
for every arm with a positive gap, where ``H_T = sum_x T_x x x^T``. Zero-gap
arms cost nothing and are pinned at an upper cap. The program is convex in
``T`` and is solved with a log-barrier interior-point method.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .instance import BanditInstance, build_registry
from .estimator import ContextLayout

logger = logging.getLogger(__name__)

DEFAULT_C = 2.0
CAP_FACTOR = 1e3
FEAS_RTOL = 1e-6
START_MARGIN = 1e-2


class InfeasibleAllocation(ValueError):
    """The arms available to the program do not span the space."""


def exploration_threshold(n: float, delta: float, d: int, c: float = DEFAULT_C) -> float:
    """``2 (1 + 1/ln n) ln(1/delta) + c d ln(d ln n)``."""
    if not n > 1:
        raise ValueError(f"n must exceed 1, got {n}")
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    if d < 1 or c <= 0:
        raise ValueError("d must be positive and c strictly positive")
    ln_n = math.log(n)
    return 2.0 * (1.0 + 1.0 / ln_n) * math.log(1.0 / delta) + c * d * math.log(d * ln_n)


def _design(weights: np.ndarray, arms: np.ndarray) -> np.ndarray:
    return (arms * np.asarray(weights, dtype=float)[:, None]).T @ arms


def _design_inverse(weights, arms) -> np.ndarray:
    H = _design(weights, arms)
    if np.linalg.matrix_rank(H) < arms.shape[1]:
        raise np.linalg.LinAlgError("H_T is singular")
    return np.linalg.inv(H)


def constraint_value(weights, arms, x) -> float:
    """``x^T H_T^{-1} x`` for ``H_T = sum_y T_y y y^T``."""
    arms = np.asarray(arms, dtype=float)
    x = np.asarray(x, dtype=float)
    return float(x @ _design_inverse(weights, arms) @ x)


def constraint_gradient(weights, arms, x) -> np.ndarray:
    """Derivative of ``x^T H_T^{-1} x`` w.r.t. each weight: ``-(x^T H_T^{-1} y)^2``."""
    arms = np.asarray(arms, dtype=float)
    x = np.asarray(x, dtype=float)
    return -((arms @ (_design_inverse(weights, arms) @ x)) ** 2)


@dataclass
class AllocationProblem:
    """Inputs of one allocation solve.

    ``gaps`` are objective costs per arm. ``constraint_gaps`` (default:
    ``gaps``) set the right-hand side of each arm's width constraint;
    arms whose constraint gap is zero are unconstrained.
    """

    arms: np.ndarray
    gaps: np.ndarray
    threshold: float
    constraint_gaps: np.ndarray | None = None
    cap: float | None = None

    def __post_init__(self):
        self.arms = np.atleast_2d(np.asarray(self.arms, dtype=float))
        self.gaps = np.asarray(self.gaps, dtype=float).reshape(-1)
        if self.constraint_gaps is None:
            self.constraint_gaps = self.gaps.copy()
        self.constraint_gaps = np.asarray(self.constraint_gaps, dtype=float).reshape(-1)
        K = self.arms.shape[0]
        if self.gaps.shape[0] != K or self.constraint_gaps.shape[0] != K:
            raise ValueError("gaps must have one entry per arm")
        if np.any(self.gaps < 0) or np.any(self.constraint_gaps < 0):
            raise ValueError("gaps must be nonnegative")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.cap is None:
            positive = np.concatenate([self.gaps[self.gaps > 0], self.constraint_gaps[self.constraint_gaps > 0]])
            dmin = positive.min() if positive.size else 1.0
            self.cap = self.threshold / dmin**2 * CAP_FACTOR
        if not self.cap > 0:
            raise ValueError("cap must be positive")

    @property
    def constrained(self) -> np.ndarray:
        return np.flatnonzero(self.constraint_gaps > 0)

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(self.gaps > 0)

    def rhs(self) -> np.ndarray:
        cg = self.constraint_gaps[self.constrained]
        return cg**2 / self.threshold


@dataclass
class AllocationSolution:
    weights: np.ndarray
    objective: float
    max_constraint_violation: float
    iterations: int
    converged: bool
    saturated: np.ndarray
    history: list[float] = field(default_factory=list)


def certify(problem: AllocationProblem, weights: np.ndarray) -> float:
    """Largest relative constraint excess ``max(0, g_x / rhs_x - 1)``."""
    idx = problem.constrained
    if idx.size == 0:
        return 0.0
    H = _design(weights, problem.arms)
    if np.linalg.matrix_rank(H) < problem.arms.shape[1]:
        return math.inf
    X = problem.arms[idx]
    vals = np.einsum("ij,ij->i", X, np.linalg.solve(H, X.T).T)
    return float(max(0.0, np.max(vals / problem.rhs() - 1.0)))


class _Barrier:
    """Barrier subproblem in the free weights ``z`` (zero-gap arms pinned at cap)."""

    def __init__(self, problem: AllocationProblem):
        self.p = problem
        gaps = problem.gaps
        self.free = problem.free
        pinned = np.flatnonzero(gaps == 0)
        self.cost = gaps[self.free]
        self.F = problem.arms[self.free]
        self.C = problem.arms[problem.constrained]
        self.rhs = problem.rhs()
        self.cap = float(problem.cap)
        P = problem.arms[pinned]
        self.H0 = self.cap * (P.T @ P)
        self.num_terms = self.C.shape[0] + 2 * self.free.size

    def full_weights(self, z: np.ndarray) -> np.ndarray:
        T = np.where(self.p.gaps == 0, self.cap, 0.0)
        T[self.free] = z
        return T

    def slacks(self, z):
        H = self.H0 + (self.F * z[:, None]).T @ self.F
        try:
            L = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            return None, None
        Linv = np.linalg.inv(L)
        Hinv = Linv.T @ Linv
        W = self.C @ Linv.T
        return self.rhs - np.einsum("ij,ij->i", W, W), Hinv

    def interior(self, z, margin: float = 0.0) -> bool:
        """Strictly feasible, with slack at least ``margin * rhs`` on every constraint."""
        if np.any(z <= 0) or np.any(z >= self.cap):
            return False
        s, _ = self.slacks(z)
        return s is not None and bool(np.all(s > margin * self.rhs))

    def value(self, z, mu) -> float:
        s, _ = self.slacks(z)
        if s is None or np.any(s <= 0) or np.any(z <= 0) or np.any(z >= self.cap):
            return math.inf
        return self.cost @ z / mu - np.log(s).sum() - np.log(z).sum() - np.log(self.cap - z).sum()

    def derivatives(self, z, mu):
        s, Hinv = self.slacks(z)
        Q = self.C @ Hinv @ self.F.T
        P = self.F @ Hinv @ self.F.T
        Q2 = Q**2
        grad = self.cost / mu - (Q2 / s[:, None]).sum(axis=0) - 1.0 / z + 1.0 / (self.cap - z)
        hess = 2.0 * (Q.T @ (Q / s[:, None])) * P + (Q2 / s[:, None] ** 2).T @ Q2
        hess[np.diag_indices_from(hess)] += 1.0 / z**2 + 1.0 / (self.cap - z) ** 2
        return grad, hess


def _initial_point(bar: _Barrier, problem: AllocationProblem, warm_start) -> np.ndarray | None:
    gaps = bar.cost
    base = problem.threshold / np.maximum(gaps, gaps.min()) ** 2
    if warm_start is not None:
        ws = np.asarray(warm_start, dtype=float)[bar.free]
        z = np.maximum(ws, 1e-3 * base)
    else:
        z = base.copy()
    z = np.minimum(z, 0.5 * bar.cap)
    for _ in range(200):
        # a start on the boundary would pin Newton there, so demand some slack
        if bar.interior(z, START_MARGIN):
            return z
        if np.all(z >= 0.5 * bar.cap):
            break
        z = np.minimum(2.0 * z, 0.5 * bar.cap)
    # last try close to the cap
    z = np.full_like(z, bar.cap * (1 - 1e-6))
    return z if bar.interior(z) else None


def solve_allocation(
    problem: AllocationProblem,
    warm_start: np.ndarray | None = None,
    mu0: float = 1.0,
    mu_min: float = 1e-8,
    max_outer: int = 200,
    max_inner: int = 100,
    tol: float = 1e-7,
) -> AllocationSolution:
    """Solve the allocation program by a log-barrier interior-point method.

    Each barrier subproblem is minimised by damped Newton steps with
    backtracking; the barrier weight is halved from ``mu0`` towards
    ``mu_min``, stopping early once the duality-gap bound
    ``num_terms * mu`` falls below ``tol`` relative to the objective.
    If the budget runs out, the last feasible iterate is returned with
    ``converged=False``.
    """
    arms = problem.arms
    d = arms.shape[1]
    rank = np.linalg.matrix_rank(arms, tol=1e-9)
    if rank < d:
        raise InfeasibleAllocation(f"arms span a {rank}-dimensional subspace, need {d}")
    bar = _Barrier(problem)
    saturated = problem.gaps == 0

    if bar.free.size == 0:
        T = bar.full_weights(np.zeros(0))
        viol = certify(problem, T)
        return AllocationSolution(T, 0.0, viol, 0, viol <= FEAS_RTOL, saturated, [0.0])

    z = _initial_point(bar, problem, warm_start)
    if z is None:
        logger.warning("allocation infeasible below the cap; returning capped weights")
        T = bar.full_weights(np.full(bar.free.size, bar.cap))
        return AllocationSolution(
            T, float(problem.gaps @ T), certify(problem, T), 0, False, np.ones_like(saturated), []
        )

    mu = mu0
    iterations = 0
    history: list[float] = []
    converged = False
    for _ in range(max_outer):
        inner_ok = False
        for _ in range(max_inner):
            iterations += 1
            grad, hess = bar.derivatives(z, mu)
            try:
                step = -np.linalg.solve(hess, grad)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
            decrement = -grad @ step
            f0 = bar.value(z, mu)
            # stop once the predicted decrease is below what f0 can resolve
            if decrement / 2 <= max(1e-9, 1e-13 * abs(f0)):
                inner_ok = True
                break
            # largest step keeping the simple bounds strictly interior
            alpha = 1.0
            neg = step < 0
            if np.any(neg):
                alpha = min(alpha, 0.99 * np.min(-z[neg] / step[neg]))
            pos = step > 0
            if np.any(pos):
                alpha = min(alpha, 0.99 * np.min((bar.cap - z[pos]) / step[pos]))
            while alpha > 1e-10:
                cand = z + alpha * step
                if bar.value(cand, mu) <= f0 - 0.25 * alpha * decrement:
                    break
                alpha *= 0.5
            else:
                inner_ok = True
                break
            z = cand
        history.append(float(bar.cost @ z))
        if inner_ok and (bar.num_terms * mu <= tol * max(history[-1], 1e-3) or mu <= mu_min):
            converged = True
            break
        mu = max(0.5 * mu, mu_min) if mu > mu_min else mu
    T = bar.full_weights(z)
    viol = certify(problem, T)
    converged = converged and viol <= FEAS_RTOL
    return AllocationSolution(T, float(problem.gaps @ T), viol, iterations, converged, saturated, history)


def registry_gaps(pair_gaps: np.ndarray, layout: ContextLayout, num_arms: int):
    """Collapse per-(context, arm) gaps onto registry arms.

    Returns the objective gap (cheapest occurrence) and the constraint gap
    (smallest positive occurrence, 0 if the arm is never suboptimal).
    """
    obj = np.full(num_arms, np.inf)
    np.minimum.at(obj, layout.pair_registry, pair_gaps)
    masked = np.where(pair_gaps > 0, pair_gaps, np.inf)
    con = np.full(num_arms, np.inf)
    np.minimum.at(con, layout.pair_registry, masked)
    con[np.isinf(con)] = 0.0
    return obj, con


def lower_bound_constant(instance: BanditInstance, **solver_kwargs) -> float:
    """Asymptotic regret constant: the program above with threshold 2 and true gaps."""
    registry = build_registry(instance)
    layout = ContextLayout(registry.context_index)
    for m in range(instance.num_contexts):
        mu = instance.means(m)
        best = registry.context_index[m][mu == mu.max()]
        if np.unique(best).size > 1:
            raise ValueError(f"context {m} has several distinct optimal arms")
    pair_gaps = np.concatenate([instance.gaps(m) for m in range(instance.num_contexts)])
    obj, con = registry_gaps(pair_gaps, layout, len(registry))
    problem = AllocationProblem(registry.unique_arms, obj, 2.0, constraint_gaps=con)
    sol = solve_allocation(problem, **solver_kwargs)
    if not sol.converged:
        logger.warning("lower-bound solve did not converge (violation %.2e)", sol.max_constraint_violation)
    return sol.objective

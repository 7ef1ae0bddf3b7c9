"""Bandit policies sharing one select/observe interface.

A policy is constructed from the known action sets (never from ``theta``)
and the horizon. Each round the runner calls ``select(context_id, arms, t)``
and then ``observe(x, y)`` exactly once.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .allocation import (
    CAP_FACTOR,
    DEFAULT_C,
    AllocationProblem,
    AllocationSolution,
    exploration_threshold,
    registry_gaps,
    solve_allocation,
)
from .estimator import GAP_FLOOR, ContextLayout, LeastSquaresState, min_positive, spanning_action
from .instance import BanditInstance, build_registry

logger = logging.getLogger(__name__)

BASELINE_RIDGE = 1e-6
DENOM_FLOOR = 1e-12

PHASE_CODES = {"init": 0, "exploit": 1, "explore-forced": 2, "explore-tracked": 3, "explore-wasted": 4}


def epsilon_schedule(t: int) -> float:
    """Forced-exploration rate ``1/ln(ln t)``, clamped to be defined and <= 1."""
    return min(1.0, 1.0 / math.log(math.log(max(t, 16))))


def linucb_beta(t: int, d: int, c: float = DEFAULT_C) -> float:
    """Confidence radius squared ``f_{t, 1/t^2}`` (``t`` clamped to 3)."""
    t = max(t, 3)
    return exploration_threshold(t, 1.0 / t**2, d, c)


def _argmax(values: np.ndarray) -> int:
    return int(np.argmax(values))


def greedy_choice(arms: np.ndarray, theta_hat: np.ndarray) -> int:
    return _argmax(arms @ theta_hat)


def optimistic_choice(arms, theta_hat, norms_sq, beta: float) -> int:
    return _argmax(arms @ theta_hat + math.sqrt(beta) * np.sqrt(np.maximum(norms_sq, 0.0)))


def exploit_criterion(norms_sq, local_gaps, delta_min: float, f_n: float) -> bool:
    """True when every arm's width is below its (estimated) gap scale."""
    bound = np.maximum(delta_min**2, np.asarray(local_gaps) ** 2) / f_n
    return bool(np.all(np.asarray(norms_sq) <= bound))


def exploration_choice(counts, targets, s_prev: int, eps: float) -> tuple[int, str] | None:
    """Forced/tracked pick, or ``None`` when every target is met (wasted round)."""
    counts = np.asarray(counts, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if np.all(counts >= targets):
        return None
    b2 = int(np.argmin(counts))
    if counts[b2] <= eps * s_prev:
        return b2, "explore-forced"
    b1 = int(np.argmin(counts / np.maximum(targets, DENOM_FLOOR)))
    return b1, "explore-tracked"


class Policy:
    name = "policy"

    def __init__(self, action_sets, horizon: int, rng: np.random.Generator | None = None):
        self.action_sets = [np.atleast_2d(np.asarray(a, dtype=float)) for a in action_sets]
        self.d = self.action_sets[0].shape[1]
        self.horizon = horizon
        self.rng = rng if rng is not None else np.random.default_rng()
        self.last_phase = "na"

    def select(self, context_id: int, arms: np.ndarray, t: int) -> int:
        raise NotImplementedError

    def observe(self, x: np.ndarray, y: float) -> None:
        self.ls.absorb(x, y)


class Greedy(Policy):
    name = "greedy"

    def __init__(self, action_sets, horizon, rng=None, ridge: float = BASELINE_RIDGE):
        super().__init__(action_sets, horizon, rng)
        self.ls = LeastSquaresState(self.d, ridge)

    def select(self, context_id, arms, t):
        return greedy_choice(arms, self.ls.theta_hat)


class LinUCB(Policy):
    name = "linucb"

    def __init__(self, action_sets, horizon, rng=None, ridge: float = BASELINE_RIDGE, c: float = DEFAULT_C):
        super().__init__(action_sets, horizon, rng)
        self.ls = LeastSquaresState(self.d, ridge)
        self.c = c

    def beta(self, t: int) -> float:
        return linucb_beta(t, self.d, self.c)

    def select(self, context_id, arms, t):
        return optimistic_choice(arms, self.ls.theta_hat, self.ls.weighted_norms_sq(arms), self.beta(t))


class LinTS(Policy):
    """Linear Thompson sampling with posterior ``N(theta_hat, v^2 G^{-1})``.

    ``variance_scale=None`` selects the theory inflation
    ``v = sqrt(24 d ln(1/delta) / eps)`` with ``eps = 1/ln n`` and
    ``delta = 1/n``.
    """

    name = "lints"

    def __init__(self, action_sets, horizon, rng=None, ridge: float = BASELINE_RIDGE, variance_scale: float | None = 1.0):
        super().__init__(action_sets, horizon, rng)
        self.ls = LeastSquaresState(self.d, ridge)
        if variance_scale is None:
            log_n = math.log(max(horizon, 3))
            variance_scale = math.sqrt(24.0 * self.d * log_n * log_n)
        self.v = float(variance_scale)

    def select(self, context_id, arms, t):
        if self.v == 0.0:
            return greedy_choice(arms, self.ls.theta_hat)
        L = np.linalg.cholesky(self.ls.gram_inverse)
        sample = self.ls.theta_hat + self.v * (L @ self.rng.standard_normal(self.d))
        return greedy_choice(arms, sample)


@dataclass
class OamLog:
    """Per-round diagnostics recorded at selection time (index t-1)."""

    phase: np.ndarray
    explorations: np.ndarray
    eps: np.ndarray
    min_count: np.ndarray
    played_count: np.ndarray
    played_target: np.ndarray
    exploit_slack: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "OamLog":
        nan = np.full(n, np.nan)
        return cls(
            phase=np.full(n, -1, dtype=np.int8),
            explorations=np.zeros(n, dtype=np.int64),
            eps=nan.copy(),
            min_count=np.zeros(n, dtype=np.int64),
            played_count=np.zeros(n, dtype=np.int64),
            played_target=nan.copy(),
            exploit_slack=nan.copy(),
        )


class OAM(Policy):
    """Optimal allocation matching.

    After a spanning initialisation, exploit greedily when every arm of the
    presented set has a confidence width below its estimated gap; otherwise
    explore by forced play of the least-played arm, by tracking the
    allocation solution, or (when all allocation targets are met) by an
    optimistic LinUCB step.
    """

    name = "oam"

    def __init__(
        self,
        action_sets,
        horizon: int,
        rng=None,
        c: float = DEFAULT_C,
        zeta: float = 0.1,
        ridge: float = 0.0,
        gap_floor: float = GAP_FLOOR,
        record: bool = True,
    ):
        super().__init__(action_sets, horizon, rng)
        if horizon < 3:
            raise ValueError("OAM needs a horizon of at least 3 rounds")
        shell = BanditInstance.from_arrays(np.zeros(self.d), self.action_sets)
        self.registry = build_registry(shell)
        self.layout = ContextLayout(self.registry.context_index)
        self.ls = LeastSquaresState(self.d, ridge)
        self.c = c
        self.zeta = zeta
        self.gap_floor = gap_floor
        self.f_n = exploration_threshold(horizon, 1.0 / horizon, self.d, c)
        self.s = 0
        self.absorbed: list[np.ndarray] = []
        self.solution: AllocationSolution | None = None
        self.pair_targets: np.ndarray | None = None
        self.solved_log_det = -np.inf
        self.num_solves = 0
        self.log = OamLog.empty(horizon) if record else None
        self._played = -1

    @property
    def counts(self) -> np.ndarray:
        return self.registry.pull_counts

    def epsilon(self, t: int) -> float:
        return epsilon_schedule(t)

    def _needs_solve(self) -> bool:
        return self.solution is None or self.ls.log_det - self.solved_log_det >= math.log1p(self.zeta)

    def _solve(self, pair_gaps: np.ndarray, delta_min: float) -> None:
        obj, con = registry_gaps(pair_gaps, self.layout, len(self.registry))
        cap = self.f_n / delta_min**2 * CAP_FACTOR
        problem = AllocationProblem(self.registry.unique_arms, obj, self.f_n, constraint_gaps=con, cap=cap)
        warm = self.solution.weights if self.solution is not None else None
        sol = solve_allocation(problem, warm_start=warm)
        self.num_solves += 1
        self.solved_log_det = self.ls.log_det
        if not sol.converged and self.solution is not None:
            logger.debug("allocation solve did not converge; keeping cached solution")
            return
        self.solution = sol
        # per-(context, arm) targets: the registry weight goes to the cheapest occurrences
        w = sol.weights[self.layout.pair_registry]
        self.pair_targets = np.where(pair_gaps <= obj[self.layout.pair_registry], w, 0.0)

    def select(self, context_id, arms, t):
        reg_idx = self.registry.context_index[context_id]
        log = self.log
        if not self.ls.invertible:
            k = spanning_action(arms, self.absorbed)
            if k is None:
                k = 0
            else:
                self.absorbed.append(arms[k])
            self.last_phase = "init"
            self._played = reg_idx[k]
            if log is not None:
                log.phase[t - 1] = 0
            return k

        theta_hat = self.ls.theta_hat
        pair_gaps, _ = self.layout.flat_gaps(self.registry.unique_arms @ theta_hat)
        delta_min = min_positive(pair_gaps, self.gap_floor)
        lo, hi = self.layout.offsets[context_id], self.layout.offsets[context_id + 1]
        local_gaps = pair_gaps[lo:hi]
        norms_sq = self.ls.weighted_norms_sq(arms)
        if self._needs_solve():
            self._solve(pair_gaps, delta_min)

        bound = np.maximum(delta_min**2, local_gaps**2) / self.f_n
        counts = self.counts[reg_idx]
        if np.all(norms_sq <= bound):
            k = int(np.argmin(local_gaps))
            phase = "exploit"
            target = np.nan
        else:
            s_prev = self.s
            self.s += 1
            targets = np.minimum(self.pair_targets[lo:hi], self.f_n / delta_min**2)
            eps = self.epsilon(t)
            pick = exploration_choice(counts, targets, s_prev, eps)
            if pick is None:
                beta = exploration_threshold(self.horizon, 1.0 / self.s**2, self.d, self.c)
                k = optimistic_choice(arms, theta_hat, norms_sq, beta)
                phase = "explore-wasted"
            else:
                k, phase = pick
            target = targets[k]
            if log is not None:
                log.eps[t - 1] = eps
                log.min_count[t - 1] = self.counts.min()
        if log is not None:
            log.phase[t - 1] = PHASE_CODES[phase]
            log.explorations[t - 1] = self.s
            log.played_count[t - 1] = counts[k]
            log.played_target[t - 1] = target
            log.exploit_slack[t - 1] = float(np.max(norms_sq - bound))
        self.last_phase = phase
        self._played = reg_idx[k]
        return k

    def observe(self, x, y):
        self.ls.absorb(x, y)
        self.registry.record(self._played)


POLICY_NAMES = ("oam", "linucb", "greedy", "lints-theory", "lints-heuristic")


def make_policy(name: str, action_sets, horizon: int, rng=None, **params) -> Policy:
    """Build a policy by CLI name; unknown keyword params are ignored per policy."""
    def pick(*keys):
        return {k: params[k] for k in keys if params.get(k) is not None}

    if name == "oam":
        return OAM(action_sets, horizon, rng, **pick("c", "zeta", "ridge", "gap_floor", "record"))
    if name == "linucb":
        return LinUCB(action_sets, horizon, rng, **pick("c", "ridge"))
    if name == "greedy":
        return Greedy(action_sets, horizon, rng, **pick("ridge"))
    if name == "lints-theory":
        return LinTS(action_sets, horizon, rng, variance_scale=None, **pick("ridge"))
    if name == "lints-heuristic":
        opts = pick("ridge", "variance_scale")
        opts.setdefault("variance_scale", 1.0)
        return LinTS(action_sets, horizon, rng, **opts)
    raise ValueError(f"unknown policy '{name}'; choose from {', '.join(POLICY_NAMES)}")


def check_oam_invariants(phases, log: OamLog, registry_size: int) -> list[str]:
    """Re-check the OAM bookkeeping of one episode; returns violation messages."""
    problems = []
    n = len(phases)
    codes = np.array([PHASE_CODES.get(p, -1) for p in phases])
    if np.any(codes < 0):
        problems.append(f"phase partition: unknown labels {sorted(set(phases) - set(PHASE_CODES))}")
    if sum(np.bincount(codes[codes >= 0], minlength=5)) != n:
        problems.append("phase partition: counts do not sum to the horizon")
    explore = codes >= 2
    if not np.array_equal(np.cumsum(explore), log.explorations[:n]):
        problems.append("s(t) differs from the number of exploration rounds so far")
    rounds = np.flatnonzero(explore)
    floor = log.eps[rounds] * log.explorations[rounds] / (2 * registry_size) - 1
    bad = rounds[log.min_count[rounds] < floor]
    if bad.size:
        t = bad[0]
        problems.append(
            f"forced floor: {bad.size} exploration rounds below the floor, first at t={t + 1} "
            f"(min N={log.min_count[t]}, floor={floor[np.searchsorted(rounds, t)]:.2f})"
        )
    exploit = np.flatnonzero(codes == 1)
    if np.any(log.exploit_slack[exploit] > 0):
        problems.append(f"exploit criterion violated at {np.sum(log.exploit_slack[exploit] > 0)} rounds")
    tracked = np.flatnonzero(codes == 3)
    if np.any(log.played_count[tracked] >= log.played_target[tracked]):
        problems.append("tracking cap: a tracked arm had already met its target")
    return problems

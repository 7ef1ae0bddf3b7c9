"""Bandit instances, context/reward sampling and regret bookkeeping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NORM_TOL = 1e-12
PROB_TOL = 1e-12
RANK_TOL = 1e-9

PHASES = ("init", "exploit", "explore-forced", "explore-tracked", "explore-wasted")
EXPLORE_PHASES = frozenset(PHASES[2:])


@dataclass
class ActionSet:
    arms: np.ndarray
    context_id: int

    def __post_init__(self):
        self.arms = np.atleast_2d(np.asarray(self.arms, dtype=float))
        if self.arms.shape[0] == 0 or self.arms.size == 0:
            raise ValueError(f"action set {self.context_id} is empty")

    def __len__(self) -> int:
        return self.arms.shape[0]


@dataclass
class BanditInstance:
    """A finite-context linear bandit with Gaussian noise.

    ``contexts[m].arms`` is a ``(K_m, d)`` array; rewards for arm ``x`` are
    ``<x, theta> + N(0, 1)``.
    """

    d: int
    theta: np.ndarray
    contexts: list[ActionSet]
    context_probs: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        self.context_probs = np.asarray(self.context_probs, dtype=float).reshape(-1)
        for m, ctx in enumerate(self.contexts):
            if ctx.arms.shape[1] != self.d:
                raise ValueError(
                    f"context {m}: arms have length {ctx.arms.shape[1]}, expected {self.d}"
                )
        if self.theta.shape[0] != self.d:
            raise ValueError(f"theta has length {self.theta.shape[0]}, expected {self.d}")
        if self.context_probs.shape[0] != len(self.contexts):
            raise ValueError("context_probs must have one entry per context")

    @classmethod
    def from_arrays(
        cls,
        theta: Sequence[float],
        contexts: Iterable[Sequence[Sequence[float]]],
        probs: Sequence[float] | None = None,
    ) -> "BanditInstance":
        theta = np.asarray(theta, dtype=float)
        sets = [ActionSet(np.asarray(arms, dtype=float), m) for m, arms in enumerate(contexts)]
        if probs is None:
            probs = np.full(len(sets), 1.0 / len(sets))
        return cls(d=theta.shape[0], theta=theta, contexts=sets, context_probs=probs)

    @property
    def num_contexts(self) -> int:
        return len(self.contexts)

    def means(self, context_id: int) -> np.ndarray:
        return self.contexts[context_id].arms @ self.theta

    def gaps(self, context_id: int) -> np.ndarray:
        mu = self.means(context_id)
        return mu.max() - mu

    def all_arms(self) -> np.ndarray:
        return np.vstack([ctx.arms for ctx in self.contexts])

    def gap_range(self) -> tuple[float, float]:
        """(smallest positive gap, largest gap) over all contexts."""
        gaps = np.concatenate([self.gaps(m) for m in range(self.num_contexts)])
        positive = gaps[gaps > 0]
        if positive.size == 0:
            return 0.0, 0.0
        return float(positive.min()), float(gaps.max())

    # JSON layout: {"d": int, "theta": [...], "contexts": [[[...], ...], ...], "probs": [...]}
    def to_json(self) -> dict:
        return {
            "d": self.d,
            "theta": self.theta.tolist(),
            "contexts": [ctx.arms.tolist() for ctx in self.contexts],
            "probs": self.context_probs.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BanditInstance":
        for key in ("theta", "contexts"):
            if key not in obj:
                raise ValueError(f"instance JSON is missing field '{key}'")
        inst = cls.from_arrays(obj["theta"], obj["contexts"], obj.get("probs"))
        if "d" in obj and int(obj["d"]) != inst.d:
            raise ValueError(f"field 'd'={obj['d']} disagrees with len(theta)={inst.d}")
        return inst

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "BanditInstance":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ValidationReport:
    """Invariant check results.

    Arm norms above 1 only weaken the theoretical guarantees, so they land
    in ``warnings``; the catalogue instances reuse (0.9, 0.5), whose norm is
    about 1.03. Probability and span problems are ``failures``.
    """

    failures: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def __bool__(self) -> bool:
        return self.ok


def validate_instance(instance: BanditInstance) -> ValidationReport:
    """Check probabilities, arm norms and the spanning condition."""
    report = ValidationReport()
    p = instance.context_probs
    for m, pm in enumerate(p):
        if not pm > 0:
            report.failures.append(f"probs: context {m} has non-positive probability {pm}")
    if abs(p.sum() - 1.0) > PROB_TOL:
        report.failures.append(f"probs: sum is {p.sum()!r}, expected 1")
    for m, ctx in enumerate(instance.contexts):
        norms = np.linalg.norm(ctx.arms, axis=1)
        for k in np.flatnonzero(norms > 1.0 + NORM_TOL):
            report.warnings.append(f"norm: context {m} arm {k} has norm {norms[k]:.6g} > 1")
    stacked = instance.all_arms()
    rank = np.linalg.matrix_rank(stacked, tol=RANK_TOL)
    if rank < instance.d:
        report.failures.append(f"span: arms have rank {rank} < d={instance.d}")
    return report


def sample_context(instance: BanditInstance, rng: np.random.Generator, size: int | None = None):
    """Draw context ids i.i.d. from ``context_probs``."""
    M = instance.num_contexts
    if M == 1:
        return 0 if size is None else np.zeros(size, dtype=int)
    return rng.choice(M, size=size, p=instance.context_probs)


def sample_reward(
    instance: BanditInstance,
    arm: np.ndarray,
    rng: np.random.Generator | None = None,
    noise: float | None = None,
) -> float:
    arm = np.asarray(arm, dtype=float)
    if arm.shape != (instance.d,):
        raise ValueError(f"arm has shape {arm.shape}, expected ({instance.d},)")
    if noise is None:
        noise = rng.standard_normal()
    return float(arm @ instance.theta + noise)


def optimal_arm(instance: BanditInstance, context_id: int) -> int:
    # np.argmax returns the first maximiser, which is the tie-break we want
    return int(np.argmax(instance.means(context_id)))


def instantaneous_regret(instance: BanditInstance, context_id: int, arm_index: int) -> float:
    mu = instance.means(context_id)
    return float(mu.max() - mu[arm_index])


@dataclass
class ArmRegistry:
    """Deduplicated union of all arm vectors, with pull counts.

    Vectors are identified by exact bitwise equality.
    """

    unique_arms: np.ndarray
    index_of: dict[tuple[int, int], int]
    context_index: list[np.ndarray]
    pull_counts: np.ndarray

    def __len__(self) -> int:
        return self.unique_arms.shape[0]

    def arm(self, context_id: int, local: int) -> np.ndarray:
        return self.unique_arms[self.index_of[(context_id, local)]]

    def record(self, registry_index: int) -> None:
        self.pull_counts[registry_index] += 1

    def reset(self) -> None:
        self.pull_counts[:] = 0


def build_registry(instance: BanditInstance) -> ArmRegistry:
    seen: dict[bytes, int] = {}
    vectors: list[np.ndarray] = []
    index_of: dict[tuple[int, int], int] = {}
    context_index = []
    for m, ctx in enumerate(instance.contexts):
        idx = np.empty(len(ctx), dtype=int)
        for k, x in enumerate(ctx.arms):
            key = np.ascontiguousarray(x).tobytes()
            if key not in seen:
                seen[key] = len(vectors)
                vectors.append(x.copy())
            index_of[(m, k)] = idx[k] = seen[key]
        context_index.append(idx)
    unique = np.array(vectors, dtype=float).reshape(len(vectors), instance.d)
    return ArmRegistry(unique, index_of, context_index, np.zeros(len(vectors), dtype=np.int64))


@dataclass
class RegretTrace:
    """Per-round log of one episode.

    ``inst_regret`` is the pseudo-regret (true gap of the played arm);
    ``realized_regret`` uses the observed reward instead of its mean.
    """

    contexts: np.ndarray
    arms: np.ndarray
    local_arms: np.ndarray
    inst_regret: np.ndarray
    realized_regret: np.ndarray
    phases: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.inst_regret.shape[0]

    @property
    def rounds(self) -> np.ndarray:
        return np.arange(1, self.horizon + 1)

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.inst_regret)

    @property
    def cum_realized_regret(self) -> np.ndarray:
        return np.cumsum(self.realized_regret)

    def phase_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(PHASES, 0)
        for ph in self.phases:
            counts[ph] = counts.get(ph, 0) + 1
        return counts

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegretTrace):
            return NotImplemented
        return (
            np.array_equal(self.contexts, other.contexts)
            and np.array_equal(self.arms, other.arms)
            and np.array_equal(self.local_arms, other.local_arms)
            and np.array_equal(self.inst_regret, other.inst_regret)
            and np.array_equal(self.realized_regret, other.realized_regret)
            and self.phases == other.phases
        )

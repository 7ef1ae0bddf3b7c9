"""Online least squares with an incrementally maintained inverse Gram matrix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .instance import BanditInstance, build_registry

GAP_FLOOR = 1e-6
SPAN_TOL = 1e-9
REFACTOR_EVERY = 512


class LeastSquaresState:
    """Least-squares estimate of ``theta`` from a stream of ``(x, y)`` pairs.

    The inverse Gram matrix is updated with the Sherman-Morrison identity
    and recomputed from scratch every ``REFACTOR_EVERY`` updates. While the
    Gram matrix is singular (no ridge, fewer than ``d`` independent
    directions) ``theta_hat`` is the minimum-norm solution and
    ``provisional`` is set.
    """

    def __init__(self, d: int, ridge: float = 0.0):
        if d < 1:
            raise ValueError("d must be positive")
        if ridge < 0:
            raise ValueError("ridge must be nonnegative")
        self.d = d
        self.ridge = float(ridge)
        self.gram = ridge * np.eye(d)
        self.response = np.zeros(d)
        self.theta_hat = np.zeros(d)
        self.rounds_absorbed = 0
        self._since_refactor = 0
        if ridge > 0:
            self.gram_inverse = np.eye(d) / ridge
            self.log_det = d * np.log(ridge)
        else:
            self.gram_inverse = None
            self.log_det = -np.inf

    @property
    def invertible(self) -> bool:
        return self.gram_inverse is not None

    @property
    def provisional(self) -> bool:
        return not self.invertible

    def absorb(self, x: np.ndarray, y: float) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise ValueError(f"x has shape {x.shape}, expected ({self.d},)")
        self.rounds_absorbed += 1
        if not x.any():
            return
        self.gram += np.outer(x, x)
        self.response += y * x
        if self.gram_inverse is None:
            if np.linalg.matrix_rank(self.gram) == self.d:
                self._refactor()
            else:
                self.theta_hat = np.linalg.lstsq(self.gram, self.response, rcond=None)[0]
                return
        else:
            self._since_refactor += 1
            if self._since_refactor >= REFACTOR_EVERY:
                self._refactor()
            else:
                gx = self.gram_inverse @ x
                denom = 1.0 + x @ gx
                self.gram_inverse -= np.outer(gx, gx) / denom
                self.log_det += np.log(denom)
        self.theta_hat = self.gram_inverse @ self.response

    def _refactor(self) -> None:
        inv = np.linalg.inv(self.gram)
        self.gram_inverse = 0.5 * (inv + inv.T)
        self.log_det = float(np.linalg.slogdet(self.gram)[1])
        self._since_refactor = 0

    def weighted_norm_sq(self, x: np.ndarray) -> float:
        """``x^T G^{-1} x``."""
        if self.gram_inverse is None:
            raise np.linalg.LinAlgError("Gram matrix is singular")
        return float(x @ self.gram_inverse @ x)

    def weighted_norms_sq(self, X: np.ndarray) -> np.ndarray:
        """Row-wise ``x^T G^{-1} x`` for a ``(K, d)`` array."""
        if self.gram_inverse is None:
            raise np.linalg.LinAlgError("Gram matrix is singular")
        return np.einsum("ij,jk,ik->i", X, self.gram_inverse, X)

    def copy(self) -> "LeastSquaresState":
        other = LeastSquaresState.__new__(LeastSquaresState)
        other.__dict__.update(self.__dict__)
        for name in ("gram", "response", "theta_hat", "gram_inverse"):
            val = getattr(self, name)
            setattr(other, name, None if val is None else val.copy())
        return other


def init_state(d: int, ridge: float = 0.0) -> LeastSquaresState:
    return LeastSquaresState(d, ridge)


@dataclass
class GapEstimate:
    gaps: list[np.ndarray]
    best: np.ndarray
    delta_min: float


class ContextLayout:
    """Flattened (context, local arm) -> registry index map for fast gap updates."""

    def __init__(self, context_index: Sequence[np.ndarray]):
        self.context_index = [np.asarray(ix) for ix in context_index]
        sizes = np.array([len(ix) for ix in self.context_index])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.pair_registry = np.concatenate(self.context_index)
        self.pair_context = np.repeat(np.arange(len(sizes)), sizes)

    def flat_gaps(self, arm_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gaps for every (context, arm) pair, plus per-context maxima.

        ``arm_values`` holds ``<x, theta_hat>`` per registry arm.
        """
        vals = arm_values[self.pair_registry]
        ctx_max = np.maximum.reduceat(vals, self.offsets[:-1])
        return ctx_max[self.pair_context] - vals, ctx_max

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        return [flat[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]


def min_positive(flat_gaps: np.ndarray, floor: float = GAP_FLOOR) -> float:
    positive = flat_gaps[flat_gaps > 0]
    return float(positive.min()) if positive.size else floor


def estimate_gaps(
    state: LeastSquaresState | np.ndarray,
    instance: BanditInstance,
    floor: float = GAP_FLOOR,
) -> GapEstimate:
    """Estimated gaps ``max_y <y - x, theta_hat>`` in every context."""
    theta_hat = state.theta_hat if isinstance(state, LeastSquaresState) else np.asarray(state)
    registry = build_registry(instance)
    layout = ContextLayout(registry.context_index)
    flat, _ = layout.flat_gaps(registry.unique_arms @ theta_hat)
    gaps = layout.split(flat)
    best = np.array([int(np.argmin(g)) for g in gaps])
    return GapEstimate(gaps=gaps, best=best, delta_min=min_positive(flat, floor))


def _rank(rows: Sequence[np.ndarray]) -> int:
    if len(rows) == 0:
        return 0
    s = np.linalg.svd(np.atleast_2d(np.asarray(rows, dtype=float)), compute_uv=False)
    return int(np.sum(s > SPAN_TOL))


def spanning_action(arms: np.ndarray, absorbed: Sequence[np.ndarray]) -> int | None:
    """Lowest-index arm that is not in the span of ``absorbed``."""
    absorbed = list(absorbed)
    base = _rank(absorbed)
    for k, x in enumerate(np.atleast_2d(arms)):
        if _rank(absorbed + [x]) > base:
            return k
    return None

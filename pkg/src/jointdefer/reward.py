"""Four-valued reward signal over (classifier correct?) x (keep/defer) and the
expected reward of the deferral policy's action distribution."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, SignalValidationError

SUM_TOLERANCE = 1e-9


class OutcomeCell(enum.Enum):
    A_KEEP_CORRECT = "a"
    B_DEFER_CORRECT = "b"
    C_KEEP_INCORRECT = "c"
    D_DEFER_INCORRECT = "d"

    @classmethod
    def of(cls, cl_correct: bool, defer: bool) -> "OutcomeCell":
        if cl_correct:
            return cls.B_DEFER_CORRECT if defer else cls.A_KEEP_CORRECT
        return cls.D_DEFER_INCORRECT if defer else cls.C_KEEP_INCORRECT


@dataclass(frozen=True)
class RewardSignal:
    a: float  # CL correct, keep
    b: float  # CL correct, defer
    c: float  # CL incorrect, keep
    d: float  # CL incorrect, defer

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "RewardSignal":
        values = list(values)
        if len(values) != 4:
            raise InvalidArgumentError(f"reward signal needs 4 values, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_list(self) -> list[float]:
        return [self.a, self.b, self.c, self.d]

    def value(self, cell: OutcomeCell) -> float:
        return getattr(self, cell.value)

    def table(self) -> np.ndarray:
        """Rows: CL incorrect, CL correct. Columns: keep, defer."""
        return np.array([[self.c, self.d], [self.a, self.b]])


DEFAULT_SIGNAL = RewardSignal(0.5, 0.1, 0.0, 0.4)


def validate_signal(A: RewardSignal) -> RewardSignal:
    """Return ``A`` unchanged if it lies on the probability simplex."""
    values = A.as_list()
    for name, v in zip("abcd", values):
        if not math.isfinite(v):
            raise SignalValidationError(f"{name}={v} is not finite", "finite")
        if v < 0:
            raise SignalValidationError(f"{name}={v} is negative; every entry must be >= 0", "non-negative")
    total = math.fsum(values)
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise SignalValidationError(f"entries sum to {total:.12g}, not 1", "sum-to-one")
    return A


def per_example_reward(p_d, cl_correct: bool, A: RewardSignal) -> float:
    p_keep, p_defer = float(p_d[0]), float(p_d[1])
    if cl_correct:
        return p_keep * A.a + p_defer * A.b
    return p_keep * A.c + p_defer * A.d


def _rewards(cl_correct, A: RewardSignal) -> np.ndarray:
    return A.table()[np.asarray(cl_correct, dtype=np.int64)]


def batch_reward(p_d, cl_correct, A: RewardSignal) -> float:
    """Mean expected reward over a batch of ``(p_d, cl_correct)`` pairs."""
    p = np.asarray(p_d, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0 or p.shape[1] != 2:
        raise InvalidArgumentError("batch_reward needs a non-empty (B, 2) array of policies")
    correct = np.asarray(cl_correct, dtype=bool)
    if correct.shape != (p.shape[0],):
        raise InvalidArgumentError("cl_correct length does not match batch")
    return float(np.mean(np.sum(p * _rewards(correct, A), axis=1)))


def batch_reward_grad_logits(p_d, cl_correct, A: RewardSignal) -> np.ndarray:
    """d batch_reward / d DP logits. ``cl_correct`` is a constant."""
    p = np.asarray(p_d, dtype=np.float64)
    r = _rewards(np.asarray(cl_correct, dtype=bool), A)
    expected = np.sum(p * r, axis=1, keepdims=True)
    return p * (r - expected) / p.shape[0]


def constrained_signal(d: float) -> RewardSignal:
    """The one-parameter family ``[1 - d, 0, 0, d]``."""
    d = float(d)
    if not 0.0 <= d <= 1.0:
        raise InvalidArgumentError(f"deferral weight must lie in [0, 1], got {d}")
    return RewardSignal(1.0 - d, 0.0, 0.0, d)

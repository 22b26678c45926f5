"""Non-joint deferral conditions: a max-softmax threshold, a logistic
regression over engineered features, and a separately trained policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointError, InvalidArgumentError, TrainingDivergenceError
from .evaluation.metrics import compute_metrics
from .dataset import FeaturizedSet
from .model import JointModel, predict, read_container, write_container
from .training import Trainer, TrainConfig

TAU_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))


@dataclass(frozen=True)
class ThresholdPolicy:
    """Defer whenever the top class probability falls below ``tau``."""

    tau: float

    def decide(self, p_c) -> np.ndarray:
        return (np.max(np.atleast_2d(p_c), axis=-1) < self.tau).astype(np.int64)


def select_threshold(p_c, gold, cl_acc: float | None = None, grid: Sequence[float] = TAU_GRID) -> float:
    """Pick tau on validation data.

    Among grid values whose SP accuracy beats ``cl_acc`` take the lowest
    deferral rate (then the lower tau). If none beats it, take the highest SP
    accuracy with the same tie-breaks.
    """
    p_c = np.atleast_2d(np.asarray(p_c, dtype=np.float64))
    gold = np.asarray(gold)
    if len(p_c) == 0:
        raise InvalidArgumentError("threshold selection needs validation examples")
    preds = predict(p_c)
    if cl_acc is None:
        cl_acc = float(np.mean(preds == gold))
    scored = []
    for tau in grid:
        m = compute_metrics(preds, gold, ThresholdPolicy(tau).decide(p_c))
        scored.append((tau, m.sp_acc, m.deferral_rate))
    qualifying = [s for s in scored if s[1] > cl_acc]
    if qualifying:
        return min(qualifying, key=lambda s: (s[2], s[0]))[0]
    return min(scored, key=lambda s: (-s[1], s[2], s[0]))[0]


# --- logistic-regression deferral -------------------------------------------

LR_FEATURE_LAYOUT = ("pred_is_0", "pred_is_1", "pred_is_2", "p_0", "p_1", "p_2", "question_train_acc")


def lr_features(p_c, predicted_class, q_acc) -> np.ndarray:
    """``[onehot(predicted_class), p_c, q_acc]``; batches give one row each."""
    p = np.asarray(p_c, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    k = p.shape[1]
    cls_ = np.atleast_1d(np.asarray(predicted_class, dtype=np.int64))
    q = np.atleast_1d(np.asarray(q_acc, dtype=np.float64))
    feats = np.concatenate([np.eye(k)[cls_], p, q[:, None]], axis=1)
    return feats[0] if single else feats


@dataclass
class QuestionAccuracyTable:
    """Classifier training accuracy per question, with a global fallback for
    questions never seen in training."""

    per_question: dict[str, float]
    global_acc: float

    @classmethod
    def fit(cls, question_ids: Sequence[str], preds, gold) -> "QuestionAccuracyTable":
        correct = np.asarray(preds) == np.asarray(gold)
        table: dict[str, list[int]] = {}
        for qid, ok in zip(question_ids, correct):
            hits, total = table.setdefault(qid, [0, 0])
            table[qid] = [hits + int(ok), total + 1]
        return cls({q: h / t for q, (h, t) in sorted(table.items())}, float(np.mean(correct)))

    def lookup(self, question_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.per_question.get(q, self.global_acc) for q in question_ids])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LRPolicy:
    weights: np.ndarray
    bias: float
    layout: tuple = LR_FEATURE_LAYOUT
    question_table: QuestionAccuracyTable | None = field(default=None, compare=False)

    def defer_probability(self, features) -> np.ndarray:
        F = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if F.shape[1] != len(self.layout):
            raise InvalidArgumentError(f"expected {len(self.layout)} features {self.layout}, got {F.shape[1]}")
        return _sigmoid(F @ self.weights + self.bias)

    def decide(self, features) -> np.ndarray:
        return (self.defer_probability(features) > 0.5).astype(np.int64)


def train_lr(features, defer_labels, epochs: int = 500, lr: float = 0.5,
             layout: tuple = LR_FEATURE_LAYOUT) -> LRPolicy:
    """Full-batch gradient descent on the mean logistic loss from zero
    weights. Rows are put in a canonical order first, so the result does
    not depend on the order they were supplied in."""
    F = np.atleast_2d(np.asarray(features, dtype=np.float64))
    t = np.asarray(defer_labels, dtype=np.float64)
    if len(F) != len(t) or len(F) == 0:
        raise InvalidArgumentError("features and labels must be non-empty and equally long")
    order = np.lexsort(np.column_stack([F, t]).T[::-1])
    F, t = F[order], t[order]
    w = np.zeros(F.shape[1])
    b = 0.0
    n = len(F)
    for _ in range(epochs):
        err = _sigmoid(F @ w + b) - t
        gw = F.T @ err / n
        gb = float(np.sum(err) / n)
        if not (np.all(np.isfinite(gw)) and math.isfinite(gb)):
            raise TrainingDivergenceError("logistic regression diverged")
        w -= lr * gw
        b -= lr * gb
    return LRPolicy(w, b, tuple(layout))


# --- independently trained policy -------------------------------------------

def policy_condition(model: JointModel, train: FeaturizedSet, validation: FeaturizedSet | None,
                     config: TrainConfig, meta: dict | None = None) -> Trainer:
    """Classifier for n+T epochs, then the policy for m+T epochs against the
    frozen classifier, each with its own cross-entropy. No joint phase."""
    trainer = Trainer(model, config, train, validation, meta)
    trainer.warmup_cl(config.n_warmup_cl + config.T)
    trainer.warmup_dp(config.m_warmup_dp + config.T)
    return trainer


# --- serialization -----------------------------------------------------------

def save_policy(policy: ThresholdPolicy | LRPolicy, path: str | Path, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    if isinstance(policy, ThresholdPolicy):
        write_container(path, {"kind": "threshold", "tau": policy.tau, "meta": meta}, {})
        return
    header = {"kind": "lr", "bias": policy.bias, "layout": list(policy.layout), "meta": meta}
    if policy.question_table is not None:
        header["question_table"] = policy.question_table.per_question
        header["global_acc"] = policy.question_table.global_acc
    write_container(path, header, {"weights": policy.weights})


def load_policy(path: str | Path) -> ThresholdPolicy | LRPolicy:
    header, tensors = read_container(path)
    kind = header.get("kind")
    if kind == "threshold":
        return ThresholdPolicy(header["tau"])
    if kind == "lr":
        table = None
        if "question_table" in header:
            table = QuestionAccuracyTable(header["question_table"], header["global_acc"])
        return LRPolicy(tensors["weights"], header["bias"], tuple(header["layout"]), table)
    raise CheckpointError(f"{path} does not hold a fitted deferral baseline (kind={kind!r})")


def policy_actions(policy: ThresholdPolicy | LRPolicy, model: JointModel, X, question_ids=None) -> np.ndarray:
    """Deferral actions of a fitted baseline on top of ``model``'s classifier."""
    _, p_c = model.cl.forward(np.asarray(X, dtype=np.float64))
    if isinstance(policy, ThresholdPolicy):
        return policy.decide(p_c)
    if policy.question_table is None or question_ids is None:
        raise InvalidArgumentError("LR policy needs question ids and a question accuracy table")
    feats = lr_features(p_c, predict(p_c), policy.question_table.lookup(question_ids))
    return policy.decide(feats)

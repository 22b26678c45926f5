"""Runs the five deferral conditions on one set of splits."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .baselines import (LRPolicy, QuestionAccuracyTable, ThresholdPolicy, lr_features, policy_actions,
                        select_threshold, train_lr)
from .dataset import DatasetSplit, Example, FeaturizedSet
from .errors import ConfigurationError, JointDeferError
from .evaluation.metrics import MetricsRecord, compute_metrics, evaluate_model
from .model import Checkpoint, JointModel, predict
from .training import EpochRecord, LossWeights, Trainer, TrainConfig, dp_labels

log = logging.getLogger(__name__)

CONDITIONS = ("thresh", "lr", "policy", "jtsp_ce", "jtsp")


def split_hash(examples: Sequence[Example]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(f"{ex.question_id}\x1f{ex.answer_text}\x1f{ex.gold_label}\x1e".encode("utf-8"))
    return h.hexdigest()[:16]


@dataclass
class ExperimentData:
    train: FeaturizedSet
    validation: FeaturizedSet
    test: FeaturizedSet

    @classmethod
    def from_split(cls, split: DatasetSplit, h: int) -> "ExperimentData":
        return cls(FeaturizedSet.build(split.train, h), FeaturizedSet.build(split.validation, h),
                   FeaturizedSet.build(split.test, h))

    @property
    def feature_dim(self) -> int:
        return self.train.X.shape[1]

    @property
    def test_hash(self) -> str:
        return split_hash(self.test.examples)


@dataclass
class ConditionResult:
    condition: str
    test: MetricsRecord | None = None
    validation: MetricsRecord | None = None
    model: JointModel | None = None
    policy: ThresholdPolicy | LRPolicy | None = None
    records: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[Checkpoint] = field(default_factory=list)
    selected: Checkpoint | None = None
    error: str | None = None


def jtsp_ce_config(config: TrainConfig) -> TrainConfig:
    """The joint condition without the reward term."""
    w = config.loss_weights
    return replace(config, loss_weights=LossWeights(w.alpha, w.beta, 0.0))


def _baseline_metrics(model: JointModel, policy, fset: FeaturizedSet) -> MetricsRecord:
    _, p_c = model.cl.forward(fset.X)
    actions = policy_actions(policy, model, fset.X, fset.question_ids)
    return compute_metrics(predict(p_c), fset.y, actions)


def fit_threshold(model: JointModel, data: ExperimentData) -> ThresholdPolicy:
    _, p_c = model.cl.forward(data.validation.X)
    return ThresholdPolicy(select_threshold(p_c, data.validation.y))


def fit_lr(model: JointModel, data: ExperimentData, epochs: int = 500, lr: float = 0.5) -> LRPolicy:
    """Question accuracies come from the training split; the regression is
    fit on validation examples labelled by the classifier's mistakes."""
    _, p_train = model.cl.forward(data.train.X)
    table = QuestionAccuracyTable.fit(data.train.question_ids, predict(p_train), data.train.y)
    _, p_val = model.cl.forward(data.validation.X)
    feats = lr_features(p_val, predict(p_val), table.lookup(data.validation.question_ids))
    labels = dp_labels(model.cl, data.validation.X, data.validation.y)
    policy = train_lr(feats, labels, epochs=epochs, lr=lr)
    policy.question_table = table
    return policy


def run_jtsp(data: ExperimentData, config: TrainConfig, cl_hidden: int = 64, dp_hidden: int = 64,
             meta: dict | None = None, condition: str = "jtsp") -> ConditionResult:
    model = JointModel.init(config.seed, data.feature_dim, cl_hidden, dp_hidden)
    trainer = Trainer(model, config, data.train, data.validation, {**(meta or {}), "condition": condition})
    result = trainer.run()
    return ConditionResult(condition, evaluate_model(result.model, data.test.X, data.test.y),
                           evaluate_model(result.model, data.validation.X, data.validation.y),
                           result.model, None, result.records, result.checkpoints, result.selected)


class _SharedClassifier:
    """Lazily trained standalone classifier reused by Thresh, LR and Policy."""

    def __init__(self, data: ExperimentData, config: TrainConfig, cl_hidden: int, dp_hidden: int, meta: dict):
        self.args = (data, config, cl_hidden, dp_hidden, meta)
        self.trainer: Trainer | None = None

    def get(self) -> Trainer:
        if self.trainer is None:
            data, config, cl_hidden, dp_hidden, meta = self.args
            model = JointModel.init(config.seed, data.feature_dim, cl_hidden, dp_hidden)
            trainer = Trainer(model, config, data.train, data.validation, {**meta, "condition": "policy"})
            trainer.warmup_cl(config.n_warmup_cl + config.T)
            self.trainer = trainer
        return self.trainer


def run_condition(cond: str, data: ExperimentData, config: TrainConfig, cl_hidden: int = 64,
                  dp_hidden: int = 64, meta: dict | None = None,
                  shared: _SharedClassifier | None = None) -> ConditionResult:
    """Run one condition; errors propagate to the caller."""
    if cond not in CONDITIONS:
        raise ConfigurationError(f"unknown condition {cond!r}; choose from {list(CONDITIONS)}")
    meta = dict(meta or {})
    if cond == "jtsp_ce":
        return run_jtsp(data, jtsp_ce_config(config), cl_hidden, dp_hidden, meta, cond)
    if cond == "jtsp":
        return run_jtsp(data, config, cl_hidden, dp_hidden, meta, cond)
    shared = shared or _SharedClassifier(data, config, cl_hidden, dp_hidden, meta)
    trainer = shared.get()
    if cond == "policy":
        if not trainer.dp_warmed:
            trainer.warmup_dp(config.m_warmup_dp + config.T)
        return ConditionResult(cond, evaluate_model(trainer.model, data.test.X, data.test.y),
                               evaluate_model(trainer.model, data.validation.X, data.validation.y),
                               trainer.model, None, list(trainer.records))
    policy = fit_threshold(trainer.model, data) if cond == "thresh" else fit_lr(trainer.model, data)
    return ConditionResult(cond, _baseline_metrics(trainer.model, policy, data.test),
                           _baseline_metrics(trainer.model, policy, data.validation),
                           trainer.model, policy, list(trainer.records))


def run_conditions(conditions: Sequence[str], data: ExperimentData, config: TrainConfig,
                   cl_hidden: int = 64, dp_hidden: int = 64, meta: dict | None = None) -> dict[str, ConditionResult]:
    """Every condition starts from the same initialization seed. Thresh, LR
    and Policy share one classifier trained alone for n+T epochs. A failing
    condition is recorded in its own result and the rest still run."""
    unknown = [c for c in conditions if c not in CONDITIONS]
    if unknown:
        raise ConfigurationError(f"unknown conditions {unknown}; choose from {list(CONDITIONS)}")
    meta = dict(meta or {})
    shared = _SharedClassifier(data, config, cl_hidden, dp_hidden, meta)
    shared_error: str | None = None
    results: dict[str, ConditionResult] = {}
    for cond in conditions:
        if cond in ("thresh", "lr", "policy") and shared_error:
            results[cond] = ConditionResult(cond, error=shared_error)
            continue
        try:
            results[cond] = run_condition(cond, data, config, cl_hidden, dp_hidden, meta, shared)
        except (JointDeferError, RuntimeError, FloatingPointError) as exc:
            log.warning("condition %s failed: %s", cond, exc)
            msg = f"{type(exc).__name__}: {exc}"
            if cond in ("thresh", "lr", "policy") and shared.trainer is None:
                shared_error = msg
            results[cond] = ConditionResult(cond, error=msg)
    return results

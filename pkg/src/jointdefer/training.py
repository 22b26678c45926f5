"""Three-phase training: classifier warmup, deferral-policy warmup with the
classifier frozen, then joint optimization of

    L = alpha * CE(CL) + beta * CE(DP) - gamma * R

where R is the batch-mean expected reward of the policy's action
distribution.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import FeaturizedSet
from .errors import ConfigurationError, InvalidArgumentError, StateError, TrainingDivergenceError
from .evaluation.metrics import MetricsRecord, evaluate_model
from .model import (CL_PARAM_NAMES, DP_PARAM_NAMES, Checkpoint, FreezeMask, JointModel, predict,
                    save_checkpoint)
from .numerics import Adam, RandomStream, cross_entropy, cross_entropy_from_logits
from .reward import (DEFAULT_SIGNAL, RewardSignal, batch_reward, batch_reward_grad_logits,
                     validate_signal)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        values = (self.alpha, self.beta, self.gamma)
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise ConfigurationError(f"loss weights must be finite and >= 0, got {values}")
        if not any(values):
            raise ConfigurationError("loss weights cannot all be zero")

    @classmethod
    def from_value(cls, value) -> "LossWeights":
        if isinstance(value, LossWeights):
            return value
        if isinstance(value, str):
            try:
                return cls(*LOSS_PRESETS[value.lower()])
            except KeyError:
                raise ConfigurationError(
                    f"unknown loss-weight preset {value!r}; choose from {sorted(LOSS_PRESETS)}") from None
        if isinstance(value, dict):
            return cls(**value)
        values = list(value)
        if len(values) != 3:
            raise ConfigurationError("loss weights need exactly [alpha, beta, gamma]")
        return cls(*(float(v) for v in values))

    def as_list(self) -> list[float]:
        return [self.alpha, self.beta, self.gamma]


# Published per-dataset settings; the ISTUDIO triple doubles as the default.
LOSS_PRESETS = {
    "istudio": (1.0, 1.0, 1.0),
    "beetle": (0.01, 0.01, 15.0),
    "scients": (0.1, 0.1, 10.0),
    "midphys": (0.1, 0.1, 1.0),
}

CL_ONLY = LossWeights(1.0, 0.0, 0.0)
DP_ONLY = LossWeights(0.0, 1.0, 0.0)


@dataclass
class TrainConfig:
    n_warmup_cl: int = 10
    m_warmup_dp: int = 10
    T: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 7
    loss_weights: LossWeights = field(default_factory=LossWeights)
    reward: RewardSignal = DEFAULT_SIGNAL
    checkpoint_dir: str | None = None
    # let the reward term's gradient reach the classifier through h_C
    reward_into_cl: bool = True
    # fraction of the training set withheld from CL warmup and used for DP warmup
    dp_label_holdout: float = 0.0

    def validate(self) -> "TrainConfig":
        for name in ("n_warmup_cl", "m_warmup_dp", "T"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigurationError("learning rate must be positive")
        if not 0.0 <= self.dp_label_holdout < 1.0:
            raise ConfigurationError("dp_label_holdout must lie in [0, 1)")
        validate_signal(self.reward)
        return self

    def to_dict(self) -> dict:
        return {
            "n_warmup_cl": self.n_warmup_cl, "m_warmup_dp": self.m_warmup_dp, "T": self.T,
            "batch_size": self.batch_size, "lr": self.lr, "seed": self.seed,
            "loss_weights": self.loss_weights.as_list(), "reward": self.reward.as_list(),
            "checkpoint_dir": self.checkpoint_dir, "reward_into_cl": self.reward_into_cl,
            "dp_label_holdout": self.dp_label_holdout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config fields: {sorted(unknown)}")
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights.from_value(d["loss_weights"])
        if "reward" in d:
            d["reward"] = RewardSignal.from_sequence(d["reward"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    loss: float
    ce_cl: float
    ce_dp: float
    reward: float
    weights: LossWeights
    validation: MetricsRecord | None = None


@dataclass
class BatchResult:
    loss: float
    ce_cl: float
    ce_dp: float
    reward: float
    grads: dict[str, np.ndarray]


def dp_labels(cl, X, y) -> np.ndarray:
    """1 where the classifier's argmax disagrees with the gold label."""
    _, p_c = cl.forward(X)
    return (predict(p_c) != np.asarray(y)).astype(np.int64)


def joint_loss(p_c, gold, p_d, defer_label, cl_correct, weights: LossWeights, A: RewardSignal) -> float:
    """Batch objective from probabilities: mean CE terms minus gamma times the
    mean expected reward."""
    p_c = np.atleast_2d(np.asarray(p_c, dtype=np.float64))
    p_d = np.atleast_2d(np.asarray(p_d, dtype=np.float64))
    ce_cl, _ = cross_entropy(p_c, np.atleast_1d(gold))
    ce_dp, _ = cross_entropy(p_d, np.atleast_1d(defer_label))
    R = batch_reward(p_d, np.atleast_1d(cl_correct), A)
    return float(weights.alpha * np.mean(ce_cl) + weights.beta * np.mean(ce_dp) - weights.gamma * R)


def batch_objective(model: JointModel, X, y, weights: LossWeights, A: RewardSignal,
                    frozen: set[str] = frozenset(), reward_into_cl: bool = True,
                    labels: np.ndarray | None = None) -> BatchResult:
    """Forward both modules, evaluate the weighted objective and backpropagate.

    Deferral labels and CL correctness come from the classifier's current
    argmax unless ``labels`` overrides the former; both are constants for
    differentiation. Gradients of frozen modules are skipped.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    B = len(X)
    h_C, p_c = model.cl.forward(X)
    _, p_d = model.dp.forward(X, h_C)
    correct = predict(p_c) == y
    d_labels = (~correct).astype(np.int64) if labels is None else labels
    ce_cl, g_cl = cross_entropy_from_logits(model.cl.logits, y)
    ce_dp, g_dp = cross_entropy_from_logits(model.dp.logits, d_labels)
    R = batch_reward(p_d, correct, A)
    mean_cl = float(np.mean(ce_cl))
    mean_dp = float(np.mean(ce_dp))
    loss = weights.alpha * mean_cl + weights.beta * mean_dp - weights.gamma * R

    grads: dict[str, np.ndarray] = {}
    cl_frozen = all(n in frozen for n in CL_PARAM_NAMES)
    dp_frozen = all(n in frozen for n in DP_PARAM_NAMES)
    g_dp_ce = weights.beta * g_dp / B
    g_dp_r = -weights.gamma * batch_reward_grad_logits(p_d, correct, A)
    grad_h = None
    dp_signal = weights.beta != 0 or weights.gamma != 0
    if not dp_frozen or (not cl_frozen and dp_signal):
        dp_grads, grad_h = model.dp.backward(g_dp_ce + g_dp_r)
        if not dp_frozen:
            grads.update(dp_grads)
    if not cl_frozen:
        if grad_h is not None and not reward_into_cl:
            grad_h = model.dp.head_input_grad(g_dp_ce)[:, : model.cl.hidden]
        grads.update(model.cl.backward(weights.alpha * g_cl / B, grad_h))
    for name in frozen:
        grads.pop(name, None)
    return BatchResult(loss, mean_cl, mean_dp, R, grads)


def batches(n: int, batch_size: int, stream: RandomStream):
    order = stream.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def select_checkpoint(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Highest validation SP accuracy; then lower deferral rate; then the
    earliest epoch."""
    if not checkpoints:
        raise InvalidArgumentError("no checkpoints to select from")

    def key(ck: Checkpoint):
        m = ck.metrics or {}
        return (-m.get("sp_acc", -math.inf), m.get("deferral_rate", math.inf), ck.epoch)

    return min(checkpoints, key=key)


class Trainer:
    """Runs the three phases in order on one :class:`JointModel`.

    Batches are shuffled from a stream derived from ``config.seed``; each
    phase starts a fresh optimizer with learning rate ``config.lr``.
    """

    def __init__(self, model: JointModel, config: TrainConfig, train: FeaturizedSet,
                 validation: FeaturizedSet | None = None, meta: dict | None = None):
        self.model = model
        self.config = config.validate()
        self.train = train
        self.validation = validation
        self.meta = dict(meta or {})
        self.stream = RandomStream(config.seed).derive(1)
        self.records: list[EpochRecord] = []
        self.checkpoints: list[Checkpoint] = []
        self.cl_epochs = 0
        self.dp_warmed = False
        self.last_dp_labels: np.ndarray | None = None
        self._cl_rows, self._dp_rows = self._partition()

    def _partition(self):
        n = len(self.train)
        frac = self.config.dp_label_holdout
        if frac == 0.0:
            rows = np.arange(n)
            return rows, rows
        held = np.sort(RandomStream(self.config.seed).derive(2).permutation(n)[: max(1, int(round(frac * n)))])
        mask = np.ones(n, dtype=bool)
        mask[held] = False
        return np.flatnonzero(mask), held

    def _validate(self) -> MetricsRecord | None:
        if self.validation is None or len(self.validation) == 0:
            return None
        return evaluate_model(self.model, self.validation.X, self.validation.y)

    def _run_phase(self, phase: str, epochs: int, rows: np.ndarray, weights: LossWeights,
                   frozen: set[str], labels: np.ndarray | None = None,
                   save: bool = False) -> list[EpochRecord]:
        optimizer = Adam(lr=self.config.lr)
        params = self.model.params()
        X, y = self.train.X[rows], self.train.y[rows]
        out = []
        for epoch in range(1, epochs + 1):
            sums = np.zeros(4)
            for idx in batches(len(rows), self.config.batch_size, self.stream):
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        res = batch_objective(self.model, X[idx], y[idx], weights, self.config.reward, frozen,
                                              self.config.reward_into_cl,
                                              None if labels is None else labels[idx])
                except InvalidArgumentError as exc:
                    # inputs were checked up front, so this means the weights blew up
                    err = TrainingDivergenceError(f"{phase} epoch {epoch}: {exc}")
                    err.last_good = self.checkpoints[-1] if self.checkpoints else None
                    raise err from exc
                if not math.isfinite(res.loss):
                    err = TrainingDivergenceError(f"non-finite loss in {phase} epoch {epoch}")
                    err.last_good = self.checkpoints[-1] if self.checkpoints else None
                    raise err
                try:
                    optimizer.step(params, res.grads, frozen)
                except TrainingDivergenceError as err:
                    err.last_good = self.checkpoints[-1] if self.checkpoints else None
                    raise
                sums += len(idx) * np.array([res.loss, res.ce_cl, res.ce_dp, res.reward])
            means = sums / len(rows)
            record = EpochRecord(epoch, phase, *map(float, means), weights, self._validate())
            out.append(record)
            self.records.append(record)
            log.debug("%s epoch %d loss %.5f", phase, epoch, record.loss)
            if save:
                self._save(phase, epoch, record)
        return out

    def _save(self, phase: str, epoch: int, record: EpochRecord) -> Checkpoint:
        metrics = record.validation.to_dict() if record.validation else {}
        ckpt = Checkpoint(self.model.copy(), phase, epoch, metrics, self.meta)
        self.checkpoints.append(ckpt)
        if self.config.checkpoint_dir:
            directory = Path(self.config.checkpoint_dir)
            directory.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt, directory / f"{phase}_epoch{epoch:03d}.ckpt")
        return ckpt

    def warmup_cl(self, n: int | None = None) -> list[EpochRecord]:
        n = self.config.n_warmup_cl if n is None else n
        records = self._run_phase("cl_warmup", n, self._cl_rows, CL_ONLY, FreezeMask.dp_frozen().names())
        self.cl_epochs += n
        return records

    def warmup_dp(self, m: int | None = None) -> list[EpochRecord]:
        """Cross-entropy against deferral labels computed once from the
        frozen classifier; classifier parameters are never touched."""
        m = self.config.m_warmup_dp if m is None else m
        if self.cl_epochs < 1:
            raise StateError("the classifier must be warmed up before the deferral policy")
        X = self.train.X[self._dp_rows]
        labels = dp_labels(self.model.cl, X, self.train.y[self._dp_rows])
        self.last_dp_labels = labels
        records = self._run_phase("dp_warmup", m, self._dp_rows, DP_ONLY, FreezeMask.cl_frozen().names(),
                                  labels=labels)
        self.dp_warmed = True
        return records

    def joint_train(self, T: int | None = None) -> list[EpochRecord]:
        T = self.config.T if T is None else T
        if self.cl_epochs < 1 or not self.dp_warmed:
            raise StateError("joint training requires both warmup phases to have run first")
        rows = np.arange(len(self.train))
        return self._run_phase("joint", T, rows, self.config.loss_weights, set(), save=True)

    def run(self) -> "TrainResult":
        self.warmup_cl()
        self.warmup_dp()
        return self.finish()

    def finish(self) -> "TrainResult":
        """Joint phase plus checkpoint selection, once both warmups are done."""
        val = self._validate()
        end_of_warmup = Checkpoint(self.model.copy(), "dp_warmup", self.config.m_warmup_dp,
                                   val.to_dict() if val else {}, self.meta)
        self.joint_train()
        candidates = self.checkpoints or [end_of_warmup]
        selected = select_checkpoint(candidates)
        self.model.restore(selected.model.snapshot())
        return TrainResult(self.model, self.records, self.checkpoints, selected, end_of_warmup)


@dataclass
class TrainResult:
    model: JointModel
    records: list[EpochRecord]
    checkpoints: list[Checkpoint]
    selected: Checkpoint
    end_of_warmup: Checkpoint | None = None


LOG_HEADER = ("epoch", "phase", "loss", "ce_cl", "ce_dp", "reward", "alpha", "beta", "gamma",
              "val_cl_acc", "val_dp_acc", "val_sp_acc", "val_sp_f1", "val_deferral_rate")


def write_epoch_log(records: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for r in records:
            v = r.validation
            val = [repr(x) for x in (v.cl_acc, v.dp_acc, v.sp_acc, v.sp_f1, v.deferral_rate)] if v else [""] * 5
            writer.writerow([r.epoch, r.phase, repr(r.loss), repr(r.ce_cl), repr(r.ce_dp), repr(r.reward),
                             *map(repr, r.weights.as_list()), *val])

"""Outcome counts and the CL / DP / SP metric suite."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import InvalidArgumentError
from ..model import JointModel, decide, predict


@dataclass(frozen=True)
class OutcomeCounts:
    n_a: int  # keep, CL correct
    n_b: int  # defer, CL correct
    n_c: int  # keep, CL incorrect
    n_d: int  # defer, CL incorrect

    @property
    def total(self) -> int:
        return self.n_a + self.n_b + self.n_c + self.n_d


@dataclass(frozen=True)
class MetricsRecord:
    cl_acc: float
    cl_f1: float
    dp_acc: float
    dp_f1: float
    sp_acc: float
    sp_f1: float
    deferral_rate: float
    counts: OutcomeCounts
    # alternative F1 reading for the deferral policy: macro over keep/defer
    dp_f1_macro: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        d = dict(d)
        d["counts"] = OutcomeCounts(**d["counts"])
        return cls(**d)


def _as_labels(values, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be one-dimensional")
    return arr.astype(np.int64)


def outcome_matrix(cl_preds, gold, actions) -> OutcomeCounts:
    preds = _as_labels(cl_preds, "cl_preds")
    gold = _as_labels(gold, "gold")
    actions = _as_labels(actions, "actions")
    if not len(preds) == len(gold) == len(actions):
        raise InvalidArgumentError("cl_preds, gold and actions must have equal length")
    correct = preds == gold
    defer = actions == 1
    return OutcomeCounts(int(np.sum(correct & ~defer)), int(np.sum(correct & defer)),
                         int(np.sum(~correct & ~defer)), int(np.sum(~correct & defer)))


def _f1_for_class(preds: np.ndarray, gold: np.ndarray, c: int) -> float:
    tp = np.sum((preds == c) & (gold == c))
    fp = np.sum((preds == c) & (gold != c))
    fn = np.sum((preds != c) & (gold == c))
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def macro_f1(preds, gold, k: int) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``gold``."""
    preds = _as_labels(preds, "preds")
    gold = _as_labels(gold, "gold")
    if len(preds) != len(gold):
        raise InvalidArgumentError("preds and gold must have equal length")
    if np.any(gold >= k) or np.any(preds >= k) or np.any(gold < 0) or np.any(preds < 0):
        raise InvalidArgumentError(f"labels must lie in [0, {k})")
    present = [c for c in range(k) if np.any(gold == c)]
    if not present:
        return 0.0
    return float(np.mean([_f1_for_class(preds, gold, c) for c in present]))


def binary_f1(preds, gold, positive: int = 1) -> float:
    """F1 of the positive class; 0 when it never occurs in either sequence."""
    return _f1_for_class(_as_labels(preds, "preds"), _as_labels(gold, "gold"), positive)


def compute_metrics(cl_preds, gold, actions, num_classes: int = 3) -> MetricsRecord:
    """Deferred examples take their gold label in the SP sequence."""
    preds = _as_labels(cl_preds, "cl_preds")
    gold = _as_labels(gold, "gold")
    actions = _as_labels(actions, "actions")
    counts = outcome_matrix(preds, gold, actions)
    n = counts.total
    if n == 0:
        raise InvalidArgumentError("cannot compute metrics on an empty set")
    defer_labels = (preds != gold).astype(np.int64)
    sp_labels = np.where(actions == 1, gold, preds)
    return MetricsRecord(
        cl_acc=(counts.n_a + counts.n_b) / n,
        cl_f1=macro_f1(preds, gold, num_classes),
        dp_acc=(counts.n_a + counts.n_d) / n,
        dp_f1=binary_f1(actions, defer_labels),
        sp_acc=(counts.n_a + counts.n_b + counts.n_d) / n,
        sp_f1=macro_f1(sp_labels, gold, num_classes),
        deferral_rate=(counts.n_b + counts.n_d) / n,
        counts=counts,
        dp_f1_macro=macro_f1(actions, defer_labels, 2),
    )


def model_outputs(model: JointModel, X, batch_size: int = 1024):
    """CL predictions and DP actions for every row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    preds, actions = [], []
    for start in range(0, len(X), batch_size):
        p_c, p_d = model.forward(X[start:start + batch_size])
        preds.append(predict(p_c))
        actions.append(decide(p_d))
    return np.concatenate(preds), np.concatenate(actions)


def evaluate_model(model: JointModel, X, y) -> MetricsRecord:
    preds, actions = model_outputs(model, X)
    return compute_metrics(preds, y, actions)


# --- reporting ---------------------------------------------------------------

TABLE_COLUMNS = ("cl_acc", "cl_f1", "dp_acc", "dp_f1", "sp_acc", "sp_f1", "deferral_rate")


def metrics_to_json(record: MetricsRecord | dict, **extra) -> str:
    payload = record.to_dict() if isinstance(record, MetricsRecord) else dict(record)
    payload.update(extra)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def load_metrics_json(path: str | Path) -> MetricsRecord:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    fields = set(MetricsRecord.__dataclass_fields__)
    return MetricsRecord.from_dict({k: v for k, v in data.items() if k in fields})


def format_table(rows: Sequence[tuple[str, MetricsRecord | None]], note: dict[str, str] | None = None) -> str:
    """Aligned text table, one row per (name, record); values in percent."""
    note = note or {}
    header = ["condition", "DP acc", "DP F1", "SP acc", "SP F1", "DR", "CL acc", "CL F1"]
    body = []
    for name, rec in rows:
        if rec is None:
            body.append([name, f"failed: {note.get(name, '')}"])
            continue
        body.append([name] + [f"{100 * v:.2f}" for v in (
            rec.dp_acc, rec.dp_f1, rec.sp_acc, rec.sp_f1, rec.deferral_rate, rec.cl_acc, rec.cl_f1)])
    widths = [max(len(r[i]) for r in [header] + [b for b in body if len(b) > i])
              for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        if len(row) == 2:
            lines.append(f"{row[0].ljust(widths[0])}  {row[1]}")
        else:
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"

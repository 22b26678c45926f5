"""Sensitivity sweep over the deferral weight ``d`` of the constrained
reward family ``[1 - d, 0, 0, d]``."""

from __future__ import annotations

import copy
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from ..errors import InvalidArgumentError, JointDeferError
from ..model import JointModel
from ..reward import constrained_signal
from ..training import Trainer, TrainConfig
from .metrics import evaluate_model

log = logging.getLogger(__name__)

SWEEP_HEADER = ("d", "deferral_rate", "sp_acc", "cl_acc", "dp_acc", "seed")


@dataclass
class SweepRow:
    d: float
    deferral_rate: float | None
    sp_acc: float | None
    cl_acc: float | None
    dp_acc: float | None
    seed: int
    error: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.d <= 1.0:
            raise InvalidArgumentError(f"d must lie in [0, 1], got {self.d}")


def default_d_values(step: float = 0.05) -> list[float]:
    """0, step, ..., 1 inclusive, rounded to avoid accumulated float error."""
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def _row(d: float, trainer: Trainer, data, seed: int) -> SweepRow:
    try:
        result = trainer.finish()
        m = evaluate_model(result.model, data.test.X, data.test.y)
        return SweepRow(d, m.deferral_rate, m.sp_acc, m.cl_acc, m.dp_acc, seed)
    except (JointDeferError, RuntimeError, FloatingPointError) as exc:
        log.warning("sweep row d=%s failed: %s", d, exc)
        return SweepRow(d, None, None, None, None, seed, f"{type(exc).__name__}: {exc}")


def _fresh_trainer(data, config: TrainConfig, cl_hidden: int, dp_hidden: int) -> Trainer:
    model = JointModel.init(config.seed, data.feature_dim, cl_hidden, dp_hidden)
    return Trainer(model, config, data.train, data.validation, {"condition": "jtsp"})


def _run_one(args) -> SweepRow:
    data, config, d, cl_hidden, dp_hidden = args
    cfg = replace(config, reward=constrained_signal(d), checkpoint_dir=None)
    try:
        trainer = _fresh_trainer(data, cfg, cl_hidden, dp_hidden)
        trainer.warmup_cl()
        trainer.warmup_dp()
    except (JointDeferError, RuntimeError) as exc:
        return SweepRow(d, None, None, None, None, cfg.seed, f"{type(exc).__name__}: {exc}")
    return _row(d, trainer, data, cfg.seed)


def sweep_d(data, config: TrainConfig, d_values: Sequence[float] | None = None, cl_hidden: int = 64,
            dp_hidden: int = 64, reuse_warmup: bool = True, workers: int = 1) -> list[SweepRow]:
    """One full three-phase run per ``d``, all from ``config.seed``.

    Neither warmup phase reads the reward signal, so by default both are run
    once and every row resumes from a deep copy of that state; the result is
    the same as retraining each row from scratch. ``reuse_warmup=False``
    retrains anyway, optionally across ``workers`` processes.
    """
    d_values = default_d_values() if d_values is None else [float(d) for d in d_values]
    for d in d_values:
        if not 0.0 <= d <= 1.0:
            raise InvalidArgumentError(f"d must lie in [0, 1], got {d}")
    config = replace(config, checkpoint_dir=None).validate()
    rows: list[SweepRow] = []
    if reuse_warmup:
        base = _fresh_trainer(data, config, cl_hidden, dp_hidden)
        try:
            base.warmup_cl()
            base.warmup_dp()
        except (JointDeferError, RuntimeError) as exc:
            msg = f"{type(exc).__name__}: {exc}"
            return sorted((SweepRow(d, None, None, None, None, config.seed, msg) for d in d_values),
                          key=lambda r: r.d)
        for d in d_values:
            # share the (read-only) feature matrices instead of copying them
            memo = {id(base.train): base.train, id(base.validation): base.validation}
            trainer = copy.deepcopy(base, memo)
            trainer.config = replace(config, reward=constrained_signal(d))
            rows.append(_row(d, trainer, data, config.seed))
    else:
        jobs = [(data, config, d, cl_hidden, dp_hidden) for d in d_values]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(_run_one, jobs))
        else:
            rows = [_run_one(job) for job in jobs]
    return sorted(rows, key=lambda r: r.d)


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    """Failed rows keep their ``d`` and seed with empty metric cells."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for r in rows:
            cells = [r.deferral_rate, r.sp_acc, r.cl_acc, r.dp_acc]
            writer.writerow([repr(r.d), *("" if c is None else repr(c) for c in cells), r.seed])


def read_sweep_csv(path: str | Path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != SWEEP_HEADER:
            raise InvalidArgumentError(f"{path}: unexpected sweep header {header}")
        out = []
        for rec in reader:
            vals = [None if v == "" else float(v) for v in rec[1:5]]
            out.append(SweepRow(float(rec[0]), *vals, int(rec[5])))
        return out

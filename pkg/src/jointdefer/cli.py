"""Command-line entry point: ``jointdefer {train,eval,compare,sweep,gen-synth}``.

Each run reads one JSON config. ``--seed``, ``--out`` and ``--threads``
override the matching fields, and the merged result is written next to the
outputs as ``resolved_config.json``.

Exit codes: 0 success, 2 configuration or input error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .baselines import load_policy, policy_actions, save_policy
from .dataset import (CLASS_SCHEMES, DEFAULT_CLASS_NAMES, DatasetSplit, FeaturizedSet, SyntheticConfig,
                      gen_synthetic, load_examples, split, write_examples)
from .errors import (CheckpointError, ConfigurationError, JointDeferError, StateError,
                     TrainingDivergenceError)
from .evaluation.metrics import compute_metrics, evaluate_model, format_table, metrics_to_json
from .evaluation.sweep import default_d_values, sweep_d, write_sweep_csv
from .model import Checkpoint, config_hash, load_checkpoint, predict, save_checkpoint
from .pipeline import CONDITIONS, ExperimentData, run_condition, run_conditions
from .training import TrainConfig, write_epoch_log

log = logging.getLogger("jointdefer")

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3


@dataclass
class RunConfig:
    """Everything one CLI run needs.

    ``data`` takes one of three forms: ``{"synthetic": {...}}``,
    ``{"path": file}`` (split here), or ``{"train": f, "validation": f,
    "test": f}`` (already split). ``labels`` names a class scheme or lists
    the class names in index order.
    """

    condition: str = "jtsp"
    conditions: list[str] = field(default_factory=lambda: list(CONDITIONS))
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    labels: str | list[str] = "beetle"
    h: int = 10
    cl_hidden: int = 64
    dp_hidden: int = 64
    split_ratios: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int | None = None
    by_question: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep_d: list[float] | None = None
    out: str = "runs"
    threads: int = 1

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("config: top level must be a JSON object")
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"config: unknown fields {sorted(unknown)}")
        train_raw = raw.pop("train", {})
        if not isinstance(train_raw, dict):
            raise ConfigurationError("train: must be an object")
        condition = raw.get("condition", "jtsp")
        if condition == "jtsp_ce":
            if "loss_weights" in train_raw:
                gamma = _field("train.loss_weights", TrainConfig.from_dict,
                               {"loss_weights": train_raw["loss_weights"]}).loss_weights.gamma
                if gamma != 0:
                    raise ConfigurationError(
                        f"train.loss_weights: condition jtsp_ce requires gamma = 0, got {gamma}")
        train = _field("train", TrainConfig.from_dict, train_raw)
        if condition == "jtsp_ce":
            w = train.loss_weights
            train = replace(train, loss_weights=type(w)(w.alpha, w.beta, 0.0))
        try:
            cfg = cls(train=train, **raw)
        except TypeError as exc:
            raise ConfigurationError(f"config: {exc}") from None
        return cfg.validate()

    def validate(self) -> "RunConfig":
        if self.condition not in CONDITIONS:
            raise ConfigurationError(f"condition: {self.condition!r} is not one of {list(CONDITIONS)}")
        bad = [c for c in self.conditions if c not in CONDITIONS]
        if bad or not self.conditions:
            raise ConfigurationError(f"conditions: unknown or empty {bad}; choose from {list(CONDITIONS)}")
        if not isinstance(self.h, int) or not 2 <= self.h <= 24:
            raise ConfigurationError(f"h: must be an integer in [2, 24], got {self.h!r}")
        for name in ("cl_hidden", "dp_hidden", "threads"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be a positive integer")
        if len(self.split_ratios) != 3:
            raise ConfigurationError("split_ratios: need three values")
        if self.sweep_d is not None and any(not 0 <= d <= 1 for d in self.sweep_d):
            raise ConfigurationError("sweep_d: every value must lie in [0, 1]")
        if isinstance(self.labels, str) and self.labels not in CLASS_SCHEMES:
            raise ConfigurationError(f"labels: unknown scheme {self.labels!r}; choose from {sorted(CLASS_SCHEMES)}")
        forms = [k for k in ("synthetic", "path", "train") if k in self.data]
        if len(forms) != 1:
            raise ConfigurationError("data: give exactly one of synthetic, path, or train/validation/test")
        if "train" in self.data and not {"validation", "test"} <= set(self.data):
            raise ConfigurationError("data: a pre-split dataset needs train, validation and test files")
        if "synthetic" in self.data:
            _field("data.synthetic", lambda d: SyntheticConfig.from_dict(d).validate(), self.data["synthetic"])
        _field("train", TrainConfig.validate, self.train)
        return self

    def to_dict(self) -> dict:
        return {
            "condition": self.condition, "conditions": list(self.conditions), "data": self.data,
            "labels": self.labels, "h": self.h, "cl_hidden": self.cl_hidden, "dp_hidden": self.dp_hidden,
            "split_ratios": list(self.split_ratios), "split_seed": self.split_seed,
            "by_question": self.by_question, "train": self.train.to_dict(), "sweep_d": self.sweep_d,
            "out": self.out, "threads": self.threads,
        }

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_SCHEMES[self.labels] if isinstance(self.labels, str) else tuple(self.labels)

    def model_meta(self, condition: str | None = None) -> dict:
        """Settings that determine a trained model; hashed into checkpoints."""
        train = self.train.to_dict()
        train.pop("checkpoint_dir")
        return {"condition": condition or self.condition, "h": self.h, "train": train}


def _field(name: str, fn, value):
    """Call ``fn(value)`` and prefix configuration errors with ``name``."""
    try:
        return fn(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


def load_run_config(path: str | Path, args: argparse.Namespace | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    cfg = RunConfig.from_dict(raw)
    if args is not None:
        if getattr(args, "seed", None) is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigurationError("--seed: must be an unsigned 64-bit integer")
            cfg.train = replace(cfg.train, seed=args.seed)
        if getattr(args, "out", None) is not None:
            cfg.out = args.out
        if getattr(args, "threads", None) is not None:
            cfg.threads = args.threads
        cfg.validate()
    return cfg


def resolve_split(cfg: RunConfig) -> DatasetSplit:
    seed = cfg.train.seed if cfg.split_seed is None else cfg.split_seed
    if "synthetic" in cfg.data:
        examples = gen_synthetic(SyntheticConfig.from_dict(cfg.data["synthetic"]))
        return split(examples, cfg.split_ratios, seed, cfg.by_question)
    fmt = cfg.data.get("format")
    if "path" in cfg.data:
        examples = load_examples(cfg.data["path"], fmt, cfg.class_names)
        return split(examples, cfg.split_ratios, seed, cfg.by_question)
    parts = [load_examples(cfg.data[k], fmt, cfg.class_names) for k in ("train", "validation", "test")]
    return DatasetSplit(*parts)


def _prepare(cfg: RunConfig) -> tuple[Path, ExperimentData]:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return out, ExperimentData.from_split(resolve_split(cfg), cfg.h)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args)
    out, data = _prepare(cfg)
    meta = cfg.model_meta()
    train_cfg = cfg.train
    if cfg.condition in ("jtsp", "jtsp_ce"):
        train_cfg = replace(train_cfg, checkpoint_dir=str(out / "checkpoints"))
    result = run_condition(cfg.condition, data, train_cfg, cfg.cl_hidden, cfg.dp_hidden, meta)
    selected = result.selected
    if selected is None:
        phase = "dp_warmup" if cfg.condition == "policy" else "cl_warmup"
        last = result.records[-1].epoch if result.records else 0
        selected = Checkpoint(result.model, phase, last, result.validation.to_dict(), meta)
    save_checkpoint(selected, out / "selected.ckpt")
    if result.policy is not None:
        save_policy(result.policy, out / "policy.bin", meta)
    write_epoch_log(result.records, out / "epoch_log.csv")
    extra = {"condition": cfg.condition, "config_hash": selected.config_hash, "test_hash": data.test_hash,
             "seed": cfg.train.seed, "selected_phase": selected.phase, "selected_epoch": selected.epoch}
    (out / "metrics.json").write_text(metrics_to_json(result.test, **extra), encoding="utf-8")
    print(format_table([(cfg.condition, result.test)]), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config) if args.config else None
    ckpt = load_checkpoint(args.checkpoint)
    if cfg is not None:
        expected = config_hash({**cfg.model_meta(ckpt.meta.get("condition")), **ckpt.model.dims})
        if expected != ckpt.config_hash:
            raise CheckpointError(f"config hash {ckpt.config_hash} of {args.checkpoint} "
                                  f"does not match {expected} from {args.config}")
    examples = load_examples(args.data, None, cfg.class_names if cfg else DEFAULT_CLASS_NAMES)
    fset = FeaturizedSet.build(examples, ckpt.meta["h"])
    if fset.X.shape[1] != ckpt.model.dims["feature_dim"]:
        raise CheckpointError("checkpoint feature_dim does not match the featurized data")
    if args.policy:
        policy = load_policy(args.policy)
        _, p_c = ckpt.model.cl.forward(fset.X)
        record = compute_metrics(predict(p_c), fset.y, policy_actions(policy, ckpt.model, fset.X, fset.question_ids))
    else:
        record = evaluate_model(ckpt.model, fset.X, fset.y)
    text = metrics_to_json(record, config_hash=ckpt.config_hash, condition=ckpt.meta.get("condition"))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_metrics.json").write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    print(format_table([(str(ckpt.meta.get("condition", "model")), record)]), end="", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_run_config(args.config, args)
    out, data = _prepare(cfg)
    meta = {k: v for k, v in cfg.model_meta().items() if k != "condition"}
    results = run_conditions(cfg.conditions, data, cfg.train, cfg.cl_hidden, cfg.dp_hidden, meta)
    report = {
        "seed": cfg.train.seed, "config_hash": config_hash(cfg.to_dict() | {"out": None}),
        "test_hash": data.test_hash,
        "rows": [{"condition": c, **(r.test.to_dict() if r.test else {"error": r.error})}
                 for c, r in results.items()],
    }
    _write_json(out / "comparison.json", report)
    notes = {c: r.error for c, r in results.items() if r.error}
    table = format_table([(c, r.test) for c, r in results.items()], notes)
    table += f"seed {report['seed']}  test split {report['test_hash']}  config {report['config_hash']}\n"
    (out / "comparison.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_TRAINING if all(r.error for r in results.values()) else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config, args)
    if cfg.condition != "jtsp":
        raise ConfigurationError(f"condition: the sweep runs jtsp, got {cfg.condition!r}")
    out, data = _prepare(cfg)
    d_values = cfg.sweep_d if cfg.sweep_d is not None else default_d_values()
    rows = sweep_d(data, cfg.train, d_values, cfg.cl_hidden, cfg.dp_hidden,
                   reuse_warmup=cfg.threads == 1, workers=cfg.threads)
    write_sweep_csv(rows, out / "sweep.csv")
    for r in rows:
        if r.error:
            print(f"d={r.d}: {r.error}", file=sys.stderr)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return EXIT_TRAINING if all(r.error for r in rows) else EXIT_OK


def cmd_gen_synth(args) -> int:
    cfg = load_run_config(args.config, args)
    if "synthetic" not in cfg.data:
        raise ConfigurationError("data: gen-synth needs a synthetic block")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    parts = resolve_split(cfg)
    fmt = args.format
    for name, examples in (("train", parts.train), ("validation", parts.validation), ("test", parts.test)):
        write_examples(examples, out / f"{name}.{fmt}", fmt, cfg.class_names)
    _write_json(out / "resolved_config.json", cfg.to_dict())
    print(f"wrote {len(parts.train)}/{len(parts.validation)}/{len(parts.test)} examples to {out}")
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointdefer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def run_options(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--threads", type=int, help="worker processes for sweeps (default 1)")

    p = sub.add_parser("train", help="train one condition and save its selected checkpoint")
    run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on a data file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="csv or jsonl examples")
    p.add_argument("--config", help="verify the checkpoint was trained from this config")
    p.add_argument("--policy", help="threshold or LR baseline saved by train")
    p.add_argument("--out", help="directory for eval_metrics.json (stdout when omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="run every listed condition on the same splits")
    run_options(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep", help="sweep the deferral weight d of the constrained reward")
    run_options(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-synth", help="write a synthetic corpus as train/validation/test files")
    run_options(p)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.set_defaults(func=cmd_gen_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (TrainingDivergenceError, StateError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (JointDeferError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Short-answer corpora: loading, hashing featurizer, stratified splits and a
synthetic generator with planted per-question difficulty."""

from __future__ import annotations

import csv
import json
import re
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError, ParseError
from .numerics import RandomStream

NUM_CLASSES = 3

# Index order is fixed: 0 = correct, 1 = incorrect, 2 = the third scheme-specific class.
CLASS_SCHEMES = {
    "beetle": ("Correct", "Incorrect", "Contradictory"),
    "scients": ("Correct", "Incorrect", "Contradictory"),
    "midphys": ("Correct", "Incorrect", "Partially Correct"),
    "istudio": ("Correct", "Incorrect", "Partially Correct"),
}
DEFAULT_CLASS_NAMES = CLASS_SCHEMES["beetle"]

FIELDS = ("question_id", "answer_text", "label")


@dataclass(frozen=True)
class Example:
    question_id: str
    answer_text: str
    gold_label: int

    def __post_init__(self):
        if not self.question_id:
            raise InvalidArgumentError("question_id must be non-empty")
        if not 0 <= self.gold_label < NUM_CLASSES:
            raise InvalidArgumentError(f"gold_label {self.gold_label} out of range")


@dataclass
class DatasetSplit:
    train: list[Example]
    validation: list[Example]
    test: list[Example]
    split_seed: int


def _label_index(raw, class_names: Sequence[str], line: int) -> int:
    if raw is None:
        raise ParseError("missing field 'label'", line)
    if isinstance(raw, int) and not isinstance(raw, bool):
        if 0 <= raw < len(class_names):
            return raw
        raise ParseError(f"label index {raw} out of range", line)
    text = str(raw).strip()
    lowered = [name.lower() for name in class_names]
    if text.lower() in lowered:
        return lowered.index(text.lower())
    if text.isdigit() and int(text) < len(class_names):
        return int(text)
    raise ParseError(f"unknown label {text!r}; expected one of {list(class_names)}", line)


def _record_to_example(record: dict, class_names, line: int) -> Example:
    for key in ("question_id", "answer_text"):
        value = record.get(key)
        if value is None:
            raise ParseError(f"missing field {key!r}", line)
    qid = str(record["question_id"]).strip()
    if not qid:
        raise ParseError("empty question_id", line)
    return Example(qid, str(record["answer_text"]), _label_index(record.get("label"), class_names, line))


def infer_format(path: str | Path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in (".jsonl", ".json", ".ndjson"):
        return "jsonl"
    raise ConfigurationError(f"cannot infer data format from {path}")


def load_examples(path: str | Path, format: str | None = None,
                  class_names: Sequence[str] = DEFAULT_CLASS_NAMES) -> list[Example]:
    """Read a CSV (header ``question_id,answer_text,label``) or JSON-lines
    file. Errors carry the 1-based physical line number."""
    fmt = format or infer_format(path)
    examples: list[Example] = []
    with open(path, newline="", encoding="utf-8") as fh:
        if fmt == "csv":
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise ParseError("empty file", 1)
            for record in reader:
                examples.append(_record_to_example(record, class_names, reader.line_num))
        elif fmt == "jsonl":
            for lineno, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    record = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
                if not isinstance(record, dict):
                    raise ParseError("expected a JSON object", lineno)
                examples.append(_record_to_example(record, class_names, lineno))
        else:
            raise ConfigurationError(f"unknown format {fmt!r}")
    if not examples:
        raise ParseError("no records found", 1)
    return examples


def write_examples(examples: Sequence[Example], path: str | Path, format: str | None = None,
                   class_names: Sequence[str] = DEFAULT_CLASS_NAMES) -> None:
    fmt = format or infer_format(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if fmt == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FIELDS)
            for ex in examples:
                writer.writerow((ex.question_id, ex.answer_text, class_names[ex.gold_label]))
        elif fmt == "jsonl":
            for ex in examples:
                record = {"question_id": ex.question_id, "answer_text": ex.answer_text,
                          "label": class_names[ex.gold_label]}
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        else:
            raise ConfigurationError(f"unknown format {fmt!r}")


# --- featurization -----------------------------------------------------------

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 18)
def _term_hash(term: str) -> int:
    return fnv1a_64(term.encode("utf-8"))


def tokenize(text: str) -> list[str]:
    # ASCII alphanumerics only; every other character separates tokens.
    return [tok for tok in _TOKEN_SPLIT.split(text.lower()) if tok]


def hashed_terms(text: str) -> list[str]:
    toks = tokenize(text)
    return toks + [f"{a} {b}" for a, b in zip(toks, toks[1:])]


def featurize(text: str, h: int) -> np.ndarray:
    """Unigram+bigram counts hashed into ``2**h`` buckets, L2-normalized."""
    if not 2 <= h <= 24:
        raise InvalidArgumentError("bucket exponent must lie in [2, 24]")
    vec = np.zeros(1 << h)
    mask = (1 << h) - 1
    for term in hashed_terms(text):
        vec[_term_hash(term) & mask] += 1.0
    norm = np.sqrt(np.dot(vec, vec))
    if norm > 0:
        vec /= norm
    return vec


def featurize_batch(texts: Sequence[str], h: int) -> np.ndarray:
    if not 2 <= h <= 24:
        raise InvalidArgumentError("bucket exponent must lie in [2, 24]")
    out = np.zeros((len(texts), 1 << h))
    for i, text in enumerate(texts):
        out[i] = featurize(text, h)
    return out


@dataclass
class FeaturizedSet:
    """Examples alongside their feature matrix and label vector."""

    examples: list[Example]
    X: np.ndarray
    y: np.ndarray

    @classmethod
    def build(cls, examples: Sequence[Example], h: int) -> "FeaturizedSet":
        examples = list(examples)
        X = featurize_batch([ex.answer_text for ex in examples], h)
        y = np.array([ex.gold_label for ex in examples], dtype=np.int64)
        return cls(examples, X, y)

    @property
    def question_ids(self) -> list[str]:
        return [ex.question_id for ex in self.examples]

    def __len__(self) -> int:
        return len(self.examples)


# --- splitting ---------------------------------------------------------------

def _split_sizes(ratios: Sequence[float], n: int) -> tuple[int, int]:
    n_train = int(np.floor(ratios[0] * n + 0.5))
    n_val = int(np.floor((ratios[0] + ratios[1]) * n + 0.5)) - n_train
    return n_train, n_val


def _stratified_order(groups: list[list[int]], stream: RandomStream) -> list[int]:
    """Interleave shuffled groups by fractional rank so that every contiguous
    chunk of the result holds each group in proportion (within one)."""
    keyed = []
    for gi, group in enumerate(groups):
        perm = stream.permutation(len(group))
        for pos, j in enumerate(perm):
            keyed.append(((pos + 0.5) / len(group), gi, group[j]))
    keyed.sort()
    return [idx for _, _, idx in keyed]


def split(data: Sequence[Example], ratios=(0.8, 0.1, 0.1), seed: int = 0,
          by_question: bool = False) -> DatasetSplit:
    """Stratified train/validation/test split, deterministic in ``seed``.

    With ``by_question`` whole questions are assigned to splits (unseen
    questions); otherwise examples are stratified by gold label.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three positive reals summing to 1, got {ratios}")
    data = list(data)
    stream = RandomStream(seed)
    assign = {}
    if by_question:
        qids = sorted({ex.question_id for ex in data})
        groups = [[i for i, ex in enumerate(data) if ex.question_id == q] for q in qids]
        order = stream.permutation(len(groups))
        n_train, n_val = _split_sizes(ratios, len(groups))
        for pos, gi in enumerate(order):
            for i in groups[gi]:
                assign[i] = 0 if pos < n_train else 1 if pos < n_train + n_val else 2
    else:
        labels = sorted({ex.gold_label for ex in data})
        groups = [[i for i, ex in enumerate(data) if ex.gold_label == lab] for lab in labels]
        n_train, n_val = _split_sizes(ratios, len(data))
        for pos, i in enumerate(_stratified_order(groups, stream)):
            assign[i] = 0 if pos < n_train else 1 if pos < n_train + n_val else 2
    parts: list[list[Example]] = [[], [], []]
    for i, ex in enumerate(data):
        parts[assign[i]].append(ex)
    for name, part in zip(("train", "validation", "test"), parts):
        if not part:
            raise ConfigurationError(f"{name} split is empty")
    return DatasetSplit(parts[0], parts[1], parts[2], seed)


# --- synthetic corpora -------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Planted-difficulty corpus.

    ``feature_dim`` is the number of latent token types per question. The
    vocabulary is partitioned into one signature block per class plus a
    shared block; each answer token comes from the shared block with
    probability ``overlap``, from another class's block with probability
    ``confusion``, and from its own class block otherwise.
    """

    num_questions: int = 20
    examples_per_question: int = 200
    num_classes: int = NUM_CLASSES
    per_question_noise: list[float] = field(
        default_factory=lambda: [round(float(v), 10) for v in np.linspace(0.0, 0.45, 20)])
    feature_dim: int = 8
    seed: int = 7
    overlap: float = 0.3
    confusion: float = 0.1
    min_length: int = 5
    max_length: int = 15

    def validate(self) -> None:
        if self.num_questions < 1 or self.examples_per_question < 1:
            raise ConfigurationError("num_questions and examples_per_question must be positive")
        if self.num_classes != NUM_CLASSES:
            raise ConfigurationError(f"only {NUM_CLASSES}-class corpora are supported")
        if len(self.per_question_noise) != self.num_questions:
            raise ConfigurationError(
                f"per_question_noise has {len(self.per_question_noise)} entries, expected {self.num_questions}")
        for q, p in enumerate(self.per_question_noise):
            if not (isinstance(p, (int, float)) and 0.0 <= p <= 0.5):
                raise ConfigurationError(f"noise for question {q} must lie in [0, 0.5], got {p!r}")
        if self.feature_dim < self.num_classes + 1:
            raise ConfigurationError("feature_dim must exceed num_classes")
        if not (0 <= self.overlap < 1 and 0 <= self.confusion < 1 and self.overlap + self.confusion < 1):
            raise ConfigurationError("overlap and confusion must be probabilities summing below 1")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigurationError("need 1 <= min_length <= max_length")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown synthetic config fields: {sorted(unknown)}")
        cfg = cls(**known)
        if "per_question_noise" not in d and cfg.num_questions != 20:
            cfg.per_question_noise = [round(float(v), 10) for v in np.linspace(0.0, 0.45, cfg.num_questions)]
        return cfg


def _blocks(vocab: int, k: int) -> list[np.ndarray]:
    # k class blocks then the shared block, as even as possible.
    return np.array_split(np.arange(vocab), k + 1)


def gen_synthetic(config: SyntheticConfig, return_latent: bool = False):
    """Generate ``num_questions * examples_per_question`` examples.

    With ``return_latent`` also returns the class each answer's text was
    drawn from (the label before any flip).
    """
    config.validate()
    k = config.num_classes
    root = RandomStream(config.seed)
    examples: list[Example] = []
    latent: list[int] = []
    for q in range(config.num_questions):
        stream = root.derive(q)
        qid = f"q{q:03d}"
        # hidden geometry: a per-question relabeling of vocabulary slots to blocks
        slots = stream.permutation(config.feature_dim)
        blocks = [slots[b] for b in _blocks(config.feature_dim, k)]
        shared = blocks[k]
        noise = float(config.per_question_noise[q])
        for _ in range(config.examples_per_question):
            cls_ = int(stream.integers(0, k))
            length = int(stream.integers(config.min_length, config.max_length + 1))
            words = []
            for u in stream.random(length):
                if u < config.overlap:
                    block = shared
                elif u < config.overlap + config.confusion:
                    others = [c for c in range(k) if c != cls_]
                    block = blocks[others[int(stream.integers(0, k - 1))]]
                else:
                    block = blocks[cls_]
                words.append(f"{qid}w{int(block[int(stream.integers(0, len(block)))]):03d}")
            label = cls_
            if stream.random() < noise:
                label = [c for c in range(k) if c != cls_][int(stream.integers(0, k - 1))]
            examples.append(Example(qid, " ".join([qid, *words]), label))
            latent.append(cls_)
    if return_latent:
        return examples, latent
    return examples

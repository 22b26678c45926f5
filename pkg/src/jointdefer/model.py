"""Classifier (CL) and deferral policy (DP) networks plus checkpoint I/O.

The DP head reads the concatenation ``[h_C, h_DP]`` of the classifier's
hidden state and its own encoder state, in that order.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, InvalidArgumentError
from .numerics import Dense, RandomStream, softmax

KEEP, DEFER = 0, 1
PHASES = ("cl_warmup", "dp_warmup", "joint")

CL_PARAM_NAMES = ("cl.enc.W", "cl.enc.b", "cl.head.W", "cl.head.b")
DP_PARAM_NAMES = ("dp.enc.W", "dp.enc.b", "dp.head.W", "dp.head.b")


class CLModel:
    """One tanh hidden layer followed by a linear head over the classes."""

    def __init__(self, encoder: Dense, head: Dense):
        if head.in_dim != encoder.out_dim:
            raise InvalidArgumentError("classification head does not match encoder width")
        self.encoder = encoder
        self.head = head
        self.logits: np.ndarray | None = None

    @classmethod
    def init(cls, stream: RandomStream, in_dim: int, hidden: int = 64, num_classes: int = 3):
        return cls(Dense.init(stream, in_dim, hidden, "tanh"),
                   Dense.init(stream, hidden, num_classes, "identity"))

    @property
    def in_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def hidden(self) -> int:
        return self.encoder.out_dim

    def forward(self, x):
        """Returns ``(h_C, p_c)``; caches activations for :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise InvalidArgumentError(f"feature dimension {x.shape[-1]} != {self.in_dim}")
        h = self.encoder.forward(x)
        self.logits = self.head.forward(h)
        return h, softmax(self.logits)

    def backward(self, grad_logits, grad_h=None) -> dict[str, np.ndarray]:
        """Gradients for all CL parameters given d/dlogits and any extra
        gradient arriving at ``h_C`` from the DP."""
        gW2, gb2, gh = self.head.backward(grad_logits)
        if grad_h is not None:
            gh = gh + grad_h
        gW1, gb1, _ = self.encoder.backward(gh)
        return {"cl.enc.W": gW1, "cl.enc.b": gb1, "cl.head.W": gW2, "cl.head.b": gb2}

    def params(self) -> dict[str, np.ndarray]:
        return {"cl.enc.W": self.encoder.W, "cl.enc.b": self.encoder.b,
                "cl.head.W": self.head.W, "cl.head.b": self.head.b}


class DPModel:
    """Separate tanh encoder; a linear keep/defer head over ``[h_C, h_DP]``."""

    def __init__(self, encoder: Dense, head: Dense, cl_hidden: int):
        if head.in_dim != cl_hidden + encoder.out_dim:
            raise InvalidArgumentError("deferral head input must equal H_C + H_D")
        if head.out_dim != 2:
            raise InvalidArgumentError("deferral head must have 2 outputs")
        self.encoder = encoder
        self.head = head
        self.cl_hidden = cl_hidden
        self.logits: np.ndarray | None = None

    @classmethod
    def init(cls, stream: RandomStream, in_dim: int, cl_hidden: int = 64, hidden: int = 64):
        return cls(Dense.init(stream, in_dim, hidden, "tanh"),
                   Dense.init(stream, cl_hidden + hidden, 2, "identity"), cl_hidden)

    @property
    def in_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def hidden(self) -> int:
        return self.encoder.out_dim

    def forward(self, x, h_C):
        """Returns ``(h_DP, p_d)`` with ``p_d = [p_keep, p_defer]``."""
        x = np.asarray(x, dtype=np.float64)
        h_C = np.asarray(h_C, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise InvalidArgumentError(f"feature dimension {x.shape[-1]} != {self.in_dim}")
        if h_C.shape[-1] != self.cl_hidden or h_C.shape[:-1] != x.shape[:-1]:
            raise InvalidArgumentError(f"h_C of shape {h_C.shape} does not fit this policy")
        h_dp = self.encoder.forward(x)
        self.logits = self.head.forward(np.concatenate([h_C, h_dp], axis=-1))
        return h_dp, softmax(self.logits)

    def backward(self, grad_logits):
        """Returns ``(grads, grad_h_C)``."""
        gW2, gb2, gconcat = self.head.backward(grad_logits)
        grad_h_C = gconcat[..., : self.cl_hidden]
        gW1, gb1, _ = self.encoder.backward(gconcat[..., self.cl_hidden:])
        grads = {"dp.enc.W": gW1, "dp.enc.b": gb1, "dp.head.W": gW2, "dp.head.b": gb2}
        return grads, grad_h_C

    def head_input_grad(self, grad_logits) -> np.ndarray:
        """d/d[h_C, h_DP] for the cached forward; the head is linear."""
        return np.asarray(grad_logits) @ self.head.W

    def params(self) -> dict[str, np.ndarray]:
        return {"dp.enc.W": self.encoder.W, "dp.enc.b": self.encoder.b,
                "dp.head.W": self.head.W, "dp.head.b": self.head.b}


class JointModel:
    """Owns a CL and a DP and exposes their parameters under one namespace."""

    def __init__(self, cl: CLModel, dp: DPModel):
        if dp.cl_hidden != cl.hidden or dp.in_dim != cl.in_dim:
            raise InvalidArgumentError("CL and DP dimensions disagree")
        self.cl = cl
        self.dp = dp

    @classmethod
    def init(cls, seed: int, in_dim: int, cl_hidden: int = 64, dp_hidden: int = 64):
        stream = RandomStream(seed)
        cl = CLModel.init(stream, in_dim, cl_hidden)
        dp = DPModel.init(stream, in_dim, cl_hidden, dp_hidden)
        return cls(cl, dp)

    def params(self) -> dict[str, np.ndarray]:
        return {**self.cl.params(), **self.dp.params()}

    def forward(self, x):
        """Returns ``(p_c, p_d)``."""
        h_C, p_c = self.cl.forward(x)
        _, p_d = self.dp.forward(x, h_C)
        return p_c, p_d

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in self.params().items():
            arr[...] = state[name]

    def copy(self) -> "JointModel":
        return copy.deepcopy(self)

    @property
    def dims(self) -> dict:
        return {"feature_dim": self.cl.in_dim, "cl_hidden": self.cl.hidden, "dp_hidden": self.dp.hidden}


@dataclass
class FreezeMask:
    frozen: dict[str, bool] = field(default_factory=dict)

    @classmethod
    def cl_frozen(cls) -> "FreezeMask":
        return cls({name: True for name in CL_PARAM_NAMES})

    @classmethod
    def dp_frozen(cls) -> "FreezeMask":
        return cls({name: True for name in DP_PARAM_NAMES})

    def names(self) -> set[str]:
        return {name for name, flag in self.frozen.items() if flag}

    def __contains__(self, name: str) -> bool:
        return self.frozen.get(name, False)


def predict(p_c) -> np.ndarray | int:
    """Argmax class; ties go to the lowest index."""
    out = np.argmax(np.asarray(p_c), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def decide(p_d) -> np.ndarray | int:
    """1 (defer) only when p_defer strictly exceeds p_keep."""
    p = np.asarray(p_d)
    out = (p[..., DEFER] > p[..., KEEP]).astype(np.int64)
    return int(out) if np.ndim(out) == 0 else out


# --- checkpoint container ----------------------------------------------------

MAGIC = b"JDEFCKPT"
FORMAT_VERSION = 1


def config_hash(meta: dict) -> str:
    canonical = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def write_container(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Magic, u32 header length, JSON header, then little-endian float64
    tensors in header order."""
    header = dict(header)
    header["version"] = FORMAT_VERSION
    header["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 4 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    offset = start + hlen
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError(f"truncated tensor {spec['name']} in {path}")
        tensors[spec["name"]] = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(spec["shape"])
        offset = end
    if offset != len(data):
        raise CheckpointError(f"trailing bytes in {path}")
    return header, tensors


@dataclass
class Checkpoint:
    model: JointModel
    phase: str
    epoch: int
    metrics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash({**self.meta, **self.model.dims})


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    if ckpt.phase not in PHASES:
        raise InvalidArgumentError(f"unknown phase {ckpt.phase!r}")
    meta = {**ckpt.meta, **ckpt.model.dims}
    header = {"kind": "model", "phase": ckpt.phase, "epoch": ckpt.epoch, "metrics": ckpt.metrics,
              "meta": meta, "config_hash": config_hash(meta)}
    write_container(path, header, ckpt.model.params())


def load_checkpoint(path: str | Path, feature_dim: int | None = None,
                    expected_hash: str | None = None) -> Checkpoint:
    header, tensors = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path} holds a {header.get('kind')!r} payload, not a model")
    meta = header["meta"]
    if config_hash(meta) != header.get("config_hash"):
        raise CheckpointError("config hash does not match checkpoint metadata")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointError(f"config hash {header['config_hash']} != expected {expected_hash}")
    if feature_dim is not None and meta["feature_dim"] != feature_dim:
        raise CheckpointError(f"checkpoint feature_dim {meta['feature_dim']} != data feature_dim {feature_dim}")
    missing = set(CL_PARAM_NAMES + DP_PARAM_NAMES) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    cl = CLModel(Dense(tensors["cl.enc.W"], tensors["cl.enc.b"], "tanh"),
                 Dense(tensors["cl.head.W"], tensors["cl.head.b"]))
    dp = DPModel(Dense(tensors["dp.enc.W"], tensors["dp.enc.b"], "tanh"),
                 Dense(tensors["dp.head.W"], tensors["dp.head.b"]), cl.hidden)
    return Checkpoint(JointModel(cl, dp), header["phase"], header["epoch"], header["metrics"], meta)

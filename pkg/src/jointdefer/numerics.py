"""Dense-layer primitives, an Adam optimizer, a seeded random stream and a
finite-difference gradient checker.

Everything works in float64. Batched inputs are row-major: a batch of ``B``
vectors of length ``n`` is an array of shape ``(B, n)``. Single vectors of
shape ``(n,)`` are accepted wherever a batch is.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple

import numpy as np

from .errors import InvalidArgumentError, StateError, TrainingDivergenceError

ACTIVATIONS = ("identity", "relu", "tanh")


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise InvalidArgumentError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return arr


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction."""
    z = _as_float_array(logits, "logits")
    if z.ndim == 0 or z.shape[-1] < 2:
        raise InvalidArgumentError("softmax needs at least 2 logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = _as_float_array(logits, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_targets(target, k: int, batch_shape: tuple) -> np.ndarray:
    t = np.asarray(target)
    if t.shape != batch_shape:
        raise InvalidArgumentError(f"target shape {t.shape} does not match batch {batch_shape}")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.equal(np.mod(t, 1), 0)):
            raise InvalidArgumentError("targets must be class indices")
        t = t.astype(np.int64)
    if np.any(t < 0) or np.any(t >= k):
        raise InvalidArgumentError(f"target out of range for {k} classes")
    return t


def _onehot(t: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[t]


def cross_entropy(p, target):
    """Cross-entropy of probabilities ``p`` against class index ``target``.

    Returns ``(loss, grad_logits)`` where ``grad_logits = p - onehot(target)``
    is the gradient with respect to the logits that produced ``p``. For a
    batch, ``loss`` is the per-example vector.
    """
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    t = _check_targets(target, k, p.shape[:-1])
    picked = np.take_along_axis(p, np.asarray(t)[..., None], axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        loss = -np.log(picked)
    loss = loss + 0.0  # turns -0.0 into 0.0
    grad = p - _onehot(t, k)
    if p.ndim == 1:
        return float(loss), grad
    return loss, grad


def cross_entropy_from_logits(logits, target):
    """Same contract as :func:`cross_entropy` but evaluated via log-sum-exp,
    so the loss stays finite when a probability underflows."""
    z = _as_float_array(logits, "logits")
    k = z.shape[-1]
    t = _check_targets(target, k, z.shape[:-1])
    logp = log_softmax(z)
    loss = -np.take_along_axis(logp, np.asarray(t)[..., None], axis=-1)[..., 0] + 0.0
    grad = np.exp(logp) - _onehot(t, k)
    if z.ndim == 1:
        return float(loss), grad
    return loss, grad


class DenseCache(NamedTuple):
    W: np.ndarray
    b: np.ndarray
    x: np.ndarray
    pre: np.ndarray
    activation: str


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return pre.copy()
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "tanh":
        return np.tanh(pre)
    raise InvalidArgumentError(f"unknown activation {activation!r}")


def _activation_grad(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return np.ones_like(pre)
    if activation == "relu":
        return (pre > 0.0).astype(np.float64)
    return 1.0 - np.tanh(pre) ** 2


def dense_forward(W, b, x, activation: str = "identity"):
    """``y = act(x @ W.T + b)``; returns ``(y, cache)``.

    ``W`` has shape ``(out, in)``, ``b`` shape ``(out,)``.
    """
    if activation not in ACTIVATIONS:
        raise InvalidArgumentError(f"unknown activation {activation!r}")
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise InvalidArgumentError(f"incompatible W {W.shape} and b {b.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise InvalidArgumentError(f"input of shape {x.shape} does not fit W {W.shape}")
    pre = x @ W.T + b
    return _activate(pre, activation), DenseCache(W, b, x, pre, activation)


def dense_backward(cache: DenseCache | None, upstream_grad):
    """Chain rule through one dense layer: ``(grad_W, grad_b, grad_x)``.

    For a batch the parameter gradients are summed over rows.
    """
    if cache is None:
        raise StateError("dense_backward called without a forward cache")
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != cache.pre.shape:
        raise InvalidArgumentError(f"upstream grad {g.shape} != output {cache.pre.shape}")
    delta = g * _activation_grad(cache.pre, cache.activation)
    if delta.ndim == 1:
        grad_W = np.outer(delta, cache.x)
        grad_b = delta.copy()
    else:
        grad_W = delta.T @ cache.x
        grad_b = delta.sum(axis=0)
    grad_x = delta @ cache.W
    return grad_W, grad_b, grad_x


class Dense:
    """A parameterized dense layer that remembers its last forward pass."""

    def __init__(self, W: np.ndarray, b: np.ndarray, activation: str = "identity"):
        if activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {activation!r}")
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.activation = activation
        self._cache: DenseCache | None = None

    @classmethod
    def init(cls, stream: "RandomStream", fan_in: int, fan_out: int, activation: str = "identity"):
        return cls(glorot_uniform(stream, fan_in, fan_out), np.zeros(fan_out), activation)

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def forward(self, x) -> np.ndarray:
        y, self._cache = dense_forward(self.W, self.b, x, self.activation)
        return y

    def backward(self, upstream_grad):
        return dense_backward(self._cache, upstream_grad)


def glorot_uniform(stream: "RandomStream", fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return stream.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class Adam:
    """Adaptive-moment optimizer with bias correction.

    Moments are created lazily per parameter name. Parameters named in
    ``frozen`` are skipped entirely, moments included.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             frozen: Iterable[str] = ()) -> None:
        frozen = set(frozen)
        active = [name for name in grads if name not in frozen]
        for name in active:
            g = grads[name]
            if g.shape != params[name].shape:
                raise InvalidArgumentError(f"gradient shape mismatch for {name}")
            if not np.all(np.isfinite(g)):
                raise TrainingDivergenceError(f"non-finite gradient for {name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in active:
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(params, grads, state: Adam, frozen: Iterable[str] = ()):
    state.step(params, grads, frozen)
    return params


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


class RandomStream:
    """Seeded PCG64 stream; equal seeds give equal draw sequences."""

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidArgumentError("seed must fit in an unsigned 64-bit integer")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    def derive(self, *keys: int) -> "RandomStream":
        """Independent child stream keyed on ``(seed, *keys)``; does not
        advance this stream."""
        child = RandomStream.__new__(RandomStream)
        child.seed = self.seed
        ss = np.random.SeedSequence([self.seed, *[int(k) for k in keys]])
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def dirichlet(self, alpha, size=None):
        return self._gen.dirichlet(alpha, size)

"""Dense kernels, parameter containers, AdamW and gradient checking.

Everything runs in float64. Matrices and vectors are plain numpy arrays;
``ParamTensor`` wraps a trainable array together with its gradient and
optimizer moments.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_row(scores: np.ndarray) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    z = np.exp(x - x.max())
    return z / z.sum()


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-d array; ``-inf`` entries get zero mass."""
    x = np.asarray(scores, dtype=np.float64)
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return (np.asarray(x) > 0).astype(np.float64)


class Rng:
    """Seeded random stream; equal seeds give equal streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed & (2**64 - 1)))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace=True, p=None):
        return self._gen.choice(seq, size=size, replace=replace, p=p)

    def random(self, size=None):
        return self._gen.random(size)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        mixed = hashlib.sha256(f"{self.seed}:{key}".encode()).digest()
        return Rng(int.from_bytes(mixed[:8], "little"))


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape if shape is not None else (fan_out, fan_in))


def he_uniform(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    """ReLU-gain uniform init; keeps activation scale constant across layers."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, (fan_out, fan_in))


@dataclass
class ParamTensor:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def copy(self) -> "ParamTensor":
        out = ParamTensor(self.name, self.value.copy())
        out.m = self.m.copy()
        out.v = self.v.copy()
        return out


def adamw_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.01, step_index=1):
    """One decoupled-weight-decay Adam update over ``params``; zeroes grads.

    The step is aborted before touching any value if a gradient is not finite.
    """
    if step_index < 1:
        raise ValueError("step_index must be >= 1")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {p.name}")
    c1 = 1.0 - beta1 ** step_index
    c2 = 1.0 - beta2 ** step_index
    for p in params:
        p.m *= beta1
        p.m += (1.0 - beta1) * p.grad
        p.v *= beta2
        p.v += (1.0 - beta2) * p.grad * p.grad
        if weight_decay:
            p.value -= lr * weight_decay * p.value
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.zero_grad()


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    passed: bool


def finite_diff_check(f, params, epsilon=1e-6, tolerance=1e-4):
    """Compare analytic grads against central differences.

    ``f`` takes no arguments, returns a scalar, and must leave the analytic
    gradient of that scalar in each ``p.grad`` when called. Relative error is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    f()
    analytic = [p.grad.copy() for p in params]
    report = []
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        numeric = np.zeros(flat.size)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + epsilon
            fp = f()
            flat[k] = old - epsilon
            fm = f()
            flat[k] = old
            numeric[k] = (fp - fm) / (2 * epsilon)
        a = a.reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        err = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
        report.append(GradCheckResult(p.name, err, err <= tolerance))
    for p in params:
        p.zero_grad()
    return report


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_tensors(path, tensors: dict, header: dict):
    """Write named arrays plus a JSON header into one ``.npz`` container."""
    header = dict(header, format_version=header.get("format_version", FORMAT_VERSION))
    arrays = {f"t/{k}": np.asarray(v) for k, v in tensors.items()}
    arrays["__header__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_tensors(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        tensors = {k[2:]: z[k].copy() for k in z.files if k.startswith("t/")}
    return tensors, header

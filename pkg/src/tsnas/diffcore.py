"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive appends one entry to a thread-local
:class:`ComputationTape`.  :func:`backward` replays the entries in reverse,
accumulating gradients into every tensor that has ``requires_grad`` set, and
then clears the tape.  A loss whose tape has been cleared cannot be
back-propagated again; run the forward pass anew instead.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _kernels
from .errors import ConfigError, DimensionError, NumericError, UsageError

__all__ = [
    "AdamW",
    "ComputationTape",
    "LinearWarmupDecay",
    "Tensor",
    "adamw_step",
    "backward",
    "concat",
    "conv1d",
    "dropout",
    "elu",
    "exp",
    "gelu",
    "glorot_uniform",
    "is_grad_enabled",
    "layer_norm",
    "leaky_relu",
    "make_rng",
    "matmul",
    "mse_loss",
    "no_grad",
    "pair_tanh_scores",
    "parameter",
    "relu",
    "sigmoid",
    "softmax",
    "spawn_rngs",
    "swish",
    "tanh",
    "tensor",
]

SUPPORTED_KERNELS = (1, 3, 5)


class ComputationTape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.entries: list[tuple[Tensor, object]] = []
        self.generation = 0
        self.grad_enabled = True

    def record(self, out: Tensor, rule) -> None:
        out._generation = self.generation
        self.entries.append((out, rule))

    def clear(self) -> None:
        self.entries.clear()
        self.generation += 1


_local = threading.local()


def _tape() -> ComputationTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = ComputationTape()
    return tape


def current_tape() -> ComputationTape:
    return _tape()


def is_grad_enabled() -> bool:
    return _tape().grad_enabled


@contextlib.contextmanager
def no_grad():
    tape = _tape()
    prev = tape.grad_enabled
    tape.grad_enabled = False
    try:
        yield
    finally:
        tape.grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._generation = -1

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, rule=None) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._generation = -1
        tape = _tape()
        out.requires_grad = tape.grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad and rule is not None:
            tape.record(out, rule)
        return out

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor._result(self.data, ())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def rule(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), rule)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor._result(-a.data, (a,), lambda g: _accum(a, -g))

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def rule(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), rule)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        out = a.data / b.data

        def rule(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * out / b.data, b.shape))

        return Tensor._result(out, (a, b), rule)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self
        e = float(exponent)

        def rule(g):
            _accum(a, g * e * a.data ** (e - 1.0))

        return Tensor._result(a.data ** e, (a,), rule)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape manipulation --------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def rule(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))

        return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), rule)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[i] for i in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._result(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)
        return Tensor._result(a.data.transpose(axes), (a,), lambda g: _accum(a, g.transpose(inv)))

    def swapaxes(self, i: int, j: int):
        axes = list(range(self.ndim))
        axes[i], axes[j] = axes[j], axes[i]
        return self.transpose(tuple(axes))

    def __getitem__(self, idx):
        a = self

        def rule(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accum(a, full)

        return Tensor._result(np.array(a.data[idx]), (a,), rule)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._result(np.asarray(x, dtype=np.float64), ())


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    tape = _tape()
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad")
    if loss._generation != tape.generation:
        raise UsageError("graph already consumed; run the forward pass again before backward")
    loss.grad = np.ones_like(loss.data)
    for out, rule in reversed(tape.entries):
        if out.grad is not None:
            rule(out.grad)
    tape.clear()


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def rule(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._result(a.data @ b.data, (a, b), rule)


def concat(tensors: list, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        for t, part in zip(tensors, np.split(g, cuts, axis=axis)):
            _accum(t, part)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def _unary(a: Tensor, value: np.ndarray, deriv) -> Tensor:
    """Elementwise op whose local derivative is produced lazily by ``deriv()``."""
    a = _as_tensor(a)
    return Tensor._result(value, (a,), lambda g: _accum(a, g * deriv()))


def exp(a: Tensor) -> Tensor:
    out = np.exp(_as_tensor(a).data)
    return _unary(a, out, lambda: out)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(_as_tensor(a).data)
    return _unary(a, out, lambda: 1.0 - out * out)


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(_as_tensor(a).data)
    return _unary(a, out, lambda: out * (1.0 - out))


def relu(a: Tensor) -> Tensor:
    x = _as_tensor(a).data
    return _unary(a, np.maximum(x, 0.0), lambda: (x > 0).astype(np.float64))


def leaky_relu(a: Tensor, slope: float = 1e-2) -> Tensor:
    x = _as_tensor(a).data
    return _unary(a, np.where(x >= 0, x, slope * x), lambda: np.where(x >= 0, 1.0, slope))


def elu(a: Tensor) -> Tensor:
    x = _as_tensor(a).data
    ex = np.exp(np.minimum(x, 0.0))
    return _unary(a, np.where(x >= 0, x, ex - 1.0), lambda: np.where(x >= 0, 1.0, ex))


def swish(a: Tensor) -> Tensor:
    x = _as_tensor(a).data
    s = special.expit(x)
    return _unary(a, x * s, lambda: s + x * s * (1.0 - s))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    x = _as_tensor(a).data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    return _unary(a, x * cdf, lambda: cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        _accum(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._result(out, (a,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def rule(g):
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return Tensor._result(xhat * gamma.data + beta.data, (x, gamma, beta), rule)


def conv1d(x: Tensor, weight: Tensor) -> Tensor:
    """Depthwise length-preserving convolution along the sequence axis.

    ``x`` has shape ``(..., L, D)`` and ``weight`` shape ``(kernel_size, D)``;
    output position ``t`` sees inputs ``t - p .. t + p`` with zero padding,
    ``p = (kernel_size - 1) // 2``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    ks = weight.shape[0]
    if ks not in SUPPORTED_KERNELS:
        raise ConfigError(f"unsupported kernel size {ks}; expected one of {SUPPORTED_KERNELS}")
    if weight.ndim != 2 or x.ndim < 2 or weight.shape[1] != x.shape[-1]:
        raise DimensionError(f"conv1d weight {weight.shape} does not match input {x.shape}")
    lead = x.shape[:-2]
    x3 = x.data.reshape((-1,) + x.shape[-2:])
    out = _kernels.depthwise_conv(x3, weight.data).reshape(x.shape)

    def rule(g):
        gx, gw = _kernels.depthwise_conv_grad(x3, weight.data, g.reshape(x3.shape))
        _accum(x, gx.reshape(lead + x.shape[-2:]))
        _accum(weight, gw)

    return Tensor._result(out, (x, weight), rule)


def pair_tanh_scores(q: Tensor, k: Tensor, w: Tensor, mode: int) -> Tensor:
    """``s[b,h,i,j] = sum_d tanh(pair(q[b,h,i,d], k[b,h,j,d])) * w[h,d]``."""
    q, k, w = _as_tensor(q), _as_tensor(k), _as_tensor(w)
    if q.shape != k.shape or q.ndim != 4:
        raise DimensionError(f"pairwise scores need equal rank-4 q/k, got {q.shape} and {k.shape}")
    if w.shape != (q.shape[1], q.shape[3]):
        raise DimensionError(f"score weights {w.shape} do not match (heads, head_dim)={q.shape[1], q.shape[3]}")
    out = _kernels.pair_tanh_scores(q.data, k.data, w.data, mode)

    def rule(g):
        gq, gk, gw = _kernels.pair_tanh_scores_grad(q.data, k.data, w.data, g, mode)
        _accum(q, gq)
        _accum(k, gk)
        _accum(w, gw)

    return Tensor._result(out, (q, k, w), rule)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor._result(keep, ())


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# randomness and initialization
# ---------------------------------------------------------------------------


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


@dataclass
class LinearWarmupDecay:
    """Linear ramp from 0 over the warm-up steps, then linear decay to 0."""

    total_steps: int
    warmup_fraction: float = 0.06

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_fraction * self.total_steps)

    def factor(self, step: int) -> float:
        warm = self.warmup_steps
        if step < warm:
            return step / max(1, warm)
        return max(0.0, (self.total_steps - step) / max(1, self.total_steps - warm))


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(param: np.ndarray, grad: np.ndarray, state: _AdamState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place decoupled-weight-decay Adam update of ``param``."""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise DimensionError(f"parameter {param.shape} and gradient {grad.shape} differ")
    b1, b2 = betas
    state.step += 1
    param *= 1.0 - lr * weight_decay
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class AdamW:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: LinearWarmupDecay | None = None
    steps_taken: int = 0
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    def current_lr(self) -> float:
        if self.schedule is None:
            return self.lr
        return self.lr * self.schedule.factor(self.steps_taken)

    def step(self, params) -> None:
        """Update every parameter carrying a gradient; parameters without one are left alone."""
        lr = self.current_lr()
        for p in params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for parameter {p.name or ''}".strip())
            st = self.state.get(p)
            if st is None:
                st = self.state[p] = _AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
            adamw_step(p.data, p.grad, st, lr, self.betas, self.eps, self.weight_decay)
        self.steps_taken += 1

    @staticmethod
    def zero_grad(params) -> None:
        for p in params:
            p.grad = None

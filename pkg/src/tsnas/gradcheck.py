"""Finite-difference checks of the reverse-mode gradients.

Small cases compare every element with a central difference.  Whole
networks are checked along random directions instead: the analytic
directional derivative ``g . v`` against ``(L(p + h v) - L(p - h v)) / 2h``.
Errors are norm-wise relative, ``|a - n| / max(|a|, |n|)``.  A gradient
that vanishes analytically (the query side of Concat scores, which softmax
cancels) counts as exact when both norms are below ``ZERO_TOL``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from ._kernels import PAIR_DIFFERENCE, PAIR_PRODUCT
from .nnops import (
    Attention,
    Encoding,
    FixedNode,
    ModelConfig,
    apply_activation,
    apply_encoding,
)
from .searchspace import ActivationKind, AttentionKind, EncodingKind

TINY = 1e-30
ZERO_TOL = 1e-8


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if np.linalg.norm(a) < ZERO_TOL and np.linalg.norm(n) < ZERO_TOL:
        return 0.0
    scale = max(np.linalg.norm(a), np.linalg.norm(n), TINY)
    return float(np.linalg.norm(a - n) / scale)


def _scalar(fn, tensors, weight):
    out = fn(*tensors)
    return (out * weight).sum()


def elementwise_check(fn, arrays, rng, h: float = 1e-5) -> float:
    """Largest relative error over the inputs of ``sum(fn(*arrays) * R)`` for a random ``R``."""
    tensors = [dc.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with dc.no_grad():
        shape = fn(*tensors).shape
    weight = rng.standard_normal(shape)
    loss = _scalar(fn, tensors, weight)
    dc.backward(loss)
    worst = 0.0
    with dc.no_grad():
        for t in tensors:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                up = _scalar(fn, tensors, weight).item()
                flat[i] = keep - h
                down = _scalar(fn, tensors, weight).item()
                flat[i] = keep
                numeric.reshape(-1)[i] = (up - down) / (2 * h)
            worst = max(worst, relative_error(analytic, numeric))
    return worst


def directional_check(loss_fn, params, rng, h: float = 1e-5, directions: int = 1) -> float:
    """Largest relative error of directional derivatives of ``loss_fn()`` along random unit directions."""
    dc.AdamW.zero_grad(params)
    loss = loss_fn()
    dc.backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    dc.AdamW.zero_grad(params)
    worst = 0.0
    for _ in range(directions):
        vs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
        vs = [v / norm for v in vs]
        analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, vs))
        with dc.no_grad():
            for p, v in zip(params, vs):
                p.data += h * v
            up = loss_fn().item()
            for p, v in zip(params, vs):
                p.data -= 2 * h * v
            down = loss_fn().item()
            for p, v in zip(params, vs):
                p.data += h * v
        worst = max(worst, relative_error(analytic, (up - down) / (2 * h)))
    return worst


# ---------------------------------------------------------------------------
# case builders: each returns (fn, arrays) for a fresh random instance
# ---------------------------------------------------------------------------


def _away_from_zero(x, margin=1e-2):
    # keep ReLU-type kinks well outside the finite-difference stencil
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _binary(op):
    def build(rng):
        return op, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]
    return build


def _unary(op, positive=False, kink=False):
    def build(rng):
        x = rng.standard_normal((3, 5))
        if positive:
            x = np.abs(x) + 0.5
        if kink:
            x = _away_from_zero(x)
        return op, [x]
    return build


def _matmul(rng):
    return dc.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))]


def _division(rng):
    return (lambda a, b: a / b), [rng.standard_normal((3, 4)), np.abs(rng.standard_normal((3, 4))) + 0.5]


def _layer_norm(rng):
    return dc.layer_norm, [rng.standard_normal((2, 3, 6)), rng.standard_normal(6), rng.standard_normal(6)]


def _conv(ks):
    def build(rng):
        return dc.conv1d, [rng.standard_normal((2, 7, 3)), rng.standard_normal((ks, 3))]
    return build


def _pair(mode):
    def build(rng):
        return ((lambda q, k, w: dc.pair_tanh_scores(q, k, w, mode)),
                [rng.standard_normal((2, 2, 4, 3)), rng.standard_normal((2, 2, 4, 3)), rng.standard_normal((2, 3))])
    return build


def _indexing(rng):
    return (lambda a: a[1:, ::2] * 2.0), [rng.standard_normal((3, 5))]


def _reshape_transpose(rng):
    return (lambda a: a.reshape(4, 3).transpose(1, 0).swapaxes(0, 1)), [rng.standard_normal((2, 6))]


def _concat(rng):
    return (lambda a, b: dc.concat([a, b], axis=1)), [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))]


def _reductions(rng):
    return (lambda a: a.sum(axis=0) + a.mean(axis=1, keepdims=True)), [rng.standard_normal((4, 4))]


def _mse(rng):
    target = rng.standard_normal((3, 4))
    return (lambda p: dc.mse_loss(p, target)), [rng.standard_normal((3, 4))]


def _attention(kind):
    def build(rng):
        d_m, heads = 8, 2
        mod = Attention(d_m, heads, [kind], rng)
        params = [mod.wq, mod.wk, mod.wv, mod.out.weight, mod.out.bias] + list(mod.score.values())
        node = FixedNode()

        def fn(x, *ps):
            for p, t in zip(params, ps):
                setattr_tensor(mod, p, t)
            return mod(x, node.active())

        return fn, [rng.standard_normal((2, 5, d_m))] + [p.data.copy() for p in params]
    return build


def setattr_tensor(module, original, replacement):
    """Point every reference to ``original`` inside ``module`` at ``replacement``."""
    for holder in [module, module.out]:
        for key, value in vars(holder).items():
            if value is original:
                setattr(holder, key, replacement)
    for key, value in module.score.items():
        if value is original:
            module.score[key] = replacement


def _rebinding(build_module):
    def build(rng):
        mod, x = build_module(rng)
        names = [n for n, _ in mod.named_parameters()]
        originals = dict(mod.named_parameters())

        def fn(x_t, *ps):
            for name, t in zip(names, ps):
                _set_by_name(mod, name, t)
            return mod(x_t)

        return fn, [x] + [originals[n].data.copy() for n in names]
    return build


def _set_by_name(module, name, value):
    *path, leaf = name.split(".")
    obj = module
    for part in path:
        obj = obj[part] if isinstance(obj, dict) else getattr(obj, part)
    if isinstance(obj, dict):
        obj[leaf] = value
    else:
        setattr(obj, leaf, value)


def _encoding(kind):
    def make(rng):
        return Encoding(kind, 6, rng), rng.standard_normal((2, 7, 6))

    if EncodingKind(kind) is EncodingKind.NULL:
        # Null contributes an exact zero; check the residual sum it feeds
        def build(rng):
            return (lambda x: x * 1.5 + apply_encoding(kind, x)), [rng.standard_normal((2, 7, 6))]
        return build

    def module_call(rng):
        mod, x = make(rng)
        return _Wrapped(mod), x

    return _rebinding(module_call)


class _Wrapped:
    def __init__(self, mod):
        self.mod = mod

    def named_parameters(self):
        return [(f"mod.{n}", p) for n, p in self.mod.named_parameters()]

    def __call__(self, x):
        return apply_encoding(self.mod.kind, x, self.mod)


def _activation(kind):
    kink = ActivationKind(kind) in (ActivationKind.RELU, ActivationKind.LEAKY_RELU, ActivationKind.ELU)
    return _unary(lambda x: apply_activation(kind, x), kink=kink)


def primitive_cases() -> dict:
    return {
        "add": _binary(lambda a, b: a + b),
        "sub": _binary(lambda a, b: a - b),
        "mul": _binary(lambda a, b: a * b),
        "div": _division,
        "pow": _unary(lambda a: a ** 1.7, positive=True),
        "matmul": _matmul,
        "sum_mean": _reductions,
        "reshape_transpose": _reshape_transpose,
        "getitem": _indexing,
        "concat": _concat,
        "exp": _unary(dc.exp),
        "tanh": _unary(dc.tanh),
        "sigmoid": _unary(dc.sigmoid),
        "softmax": _unary(lambda a: dc.softmax(a, axis=-1)),
        "layer_norm": _layer_norm,
        "conv1d_k1": _conv(1),
        "conv1d_k3": _conv(3),
        "conv1d_k5": _conv(5),
        "pair_product": _pair(PAIR_PRODUCT),
        "pair_difference": _pair(PAIR_DIFFERENCE),
        "mse_loss": _mse,
    }


def gradient_cases() -> dict:
    cases = {f"primitive:{k}": v for k, v in primitive_cases().items()}
    cases.update({f"attention:{k.value}": _attention(k) for k in AttentionKind})
    cases.update({f"activation:{k.value}": _activation(k) for k in ActivationKind})
    cases.update({f"encoding:{k.value}": _encoding(k) for k in EncodingKind})
    return cases


def hypernet_loss_case(rng, seed: int):
    """Directional check of a one-block hyper-network MSE loss over weights and alpha."""
    from .hypernet import HyperNetwork

    cfg = ModelConfig(d_m=8, num_blocks=1, num_heads=2, patch_len=4, patch_stride=2, lookback=12,
                      horizon=3, dropout=0.0)
    model = HyperNetwork(cfg, seed=seed)
    for node in model.nodes:
        node.alpha.data[:] = rng.standard_normal(node.alpha.shape)
    x = rng.standard_normal((2, 1, cfg.lookback))
    y = rng.standard_normal((2, 1, cfg.horizon))
    params = model.parameters() + model.alphas()
    return (lambda: dc.mse_loss(model(x), y)), params


@dataclass
class CaseResult:
    name: str
    instances: int
    max_error: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "instances": self.instances, "max_error": self.max_error, "passed": self.passed}


def run_suite(instances: int = 25, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
              include_hypernet: bool = True, only=None) -> tuple[list[CaseResult], float]:
    """Run every case ``instances`` times; returns per-case results and wall time."""
    t0 = time.perf_counter()
    rng = dc.make_rng(seed)
    results = []
    for name, build in gradient_cases().items():
        if only is not None and name not in only:
            continue
        worst = 0.0
        for _ in range(instances):
            fn, arrays = build(rng)
            worst = max(worst, elementwise_check(fn, arrays, rng, h))
        results.append(CaseResult(name, instances, worst, worst < tol))
    if include_hypernet and (only is None or "hypernet:1-block" in only):
        worst = 0.0
        for i in range(instances):
            loss_fn, params = hypernet_loss_case(rng, seed + i)
            worst = max(worst, directional_check(loss_fn, params, rng, h))
        results.append(CaseResult("hypernet:1-block", instances, worst, worst < tol))
    return results, time.perf_counter() - t0

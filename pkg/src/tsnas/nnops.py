"""Searchable Transformer operations and the patch-based forecasting model.

A block computes::

    X1 = Attn(LN(X)) + EncA(X)
    X' = FFN(LN(X1)) + EncF(X1)

Every slot of a block holds a tuple of candidates and a *node* deciding which
candidates are active and with what weight.  A fixed :class:`ForecastModel`
has exactly one candidate per slot; the hyper-network in :mod:`tsnas.hypernet`
reuses the same blocks with every candidate present.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from ._kernels import PAIR_DIFFERENCE, PAIR_PRODUCT
from .diffcore import Tensor
from .errors import ConfigError, DimensionError
from .searchspace import (
    SLOTS,
    WIDTH_FACTORS,
    ActivationKind,
    ArchitectureSpec,
    AttentionKind,
    BlockSpec,
    EncodingKind,
    ffn_width,
)


@dataclass
class ModelConfig:
    d_m: int = 256
    num_blocks: int = 3
    num_heads: int = 4
    patch_len: int = 16
    patch_stride: int = 8
    lookback: int = 512
    horizon: int = 96
    num_channels: int = 1
    dropout: float = 0.1
    instance_norm: bool = True

    def __post_init__(self):
        if self.d_m % self.num_heads:
            raise ConfigError(f"d_m={self.d_m} not divisible by num_heads={self.num_heads}")
        if self.patch_len > self.lookback:
            raise ConfigError(f"lookback {self.lookback} shorter than patch length {self.patch_len}")
        if self.patch_stride < 1 or self.num_blocks < 1 or self.horizon < 1:
            raise ConfigError("patch_stride, num_blocks and horizon must be >= 1")
        for k in WIDTH_FACTORS:
            ffn_width(self.d_m, k)

    @property
    def head_dim(self) -> int:
        return self.d_m // self.num_heads

    @property
    def num_patches(self) -> int:
        return num_patches(self.lookback, self.patch_len, self.patch_stride)

    def to_dict(self) -> dict:
        return asdict(self)


def num_patches(lookback: int, patch_len: int, stride: int) -> int:
    if lookback < patch_len:
        raise ConfigError(f"lookback {lookback} shorter than patch length {patch_len}")
    return (lookback - patch_len) // stride + 1


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------


class Module:
    training = True

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self):
        yield self
        for key, value in vars(self).items():
            if not key.startswith("_"):
                yield from _walk_modules(value)

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise DimensionError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in own.items():
            if name in state:
                if state[name].shape != p.shape:
                    raise DimensionError(f"{name}: stored {state[name].shape} vs model {p.shape}")
                p.data[...] = state[name]


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def _walk_modules(value):
    if isinstance(value, Module):
        yield from value.modules()
    elif isinstance(value, dict):
        for v in value.values():
            yield from _walk_modules(v)
    elif isinstance(value, (list, tuple)):
        for v in value:
            yield from _walk_modules(v)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True):
        self.weight = dc.parameter(dc.glorot_uniform(rng, d_in, d_out))
        self.bias = dc.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = dc.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = dc.parameter(np.ones(d))
        self.beta = dc.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return dc.layer_norm(x, self.gamma, self.beta)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

_ACTIVATIONS = {
    ActivationKind.RELU: dc.relu,
    ActivationKind.LEAKY_RELU: dc.leaky_relu,
    ActivationKind.ELU: dc.elu,
    ActivationKind.SWISH: dc.swish,
    ActivationKind.GELU: dc.gelu,
}


def apply_activation(kind, x):
    return _ACTIVATIONS[ActivationKind(kind)](dc._as_tensor(x))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def score_param_shape(kind: AttentionKind, num_heads: int, head_dim: int):
    kind = AttentionKind(kind)
    if kind is AttentionKind.DOT:
        return None
    if kind is AttentionKind.BILINEAR:
        return (num_heads, head_dim, head_dim)
    if kind is AttentionKind.CONCAT:
        return (num_heads, 2 * head_dim)
    return (num_heads, head_dim)


def attention_scores(kind, q: Tensor, k: Tensor, w: Tensor | None = None) -> Tensor:
    """Raw (pre-softmax) scores for queries/keys shaped ``(B, H, L, d_h)``.

    ``w`` holds the per-head score parameters: ``(H, d_h)`` for EP/Minus,
    ``(H, d_h, d_h)`` for Bilinear, ``(H, 2 d_h)`` for Concat, ``None`` for Dot.
    """
    kind = AttentionKind(kind)
    q, k = dc._as_tensor(q), dc._as_tensor(k)
    if q.shape != k.shape:
        raise DimensionError(f"query {q.shape} and key {k.shape} shapes differ")
    if q.ndim != 4:
        raise DimensionError(f"expected (batch, heads, length, head_dim), got {q.shape}")
    dh = q.shape[-1]
    expected = score_param_shape(kind, q.shape[1], dh)
    if expected is not None and (w is None or tuple(w.shape) != expected):
        raise DimensionError(f"{kind.value} needs score weights of shape {expected}, got {None if w is None else w.shape}")
    if kind is AttentionKind.DOT:
        return dc.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if kind is AttentionKind.EP:
        return dc.pair_tanh_scores(q, k, w, PAIR_PRODUCT)
    if kind is AttentionKind.MINUS:
        return dc.pair_tanh_scores(q, k, w, PAIR_DIFFERENCE)
    if kind is AttentionKind.BILINEAR:
        return dc.matmul(dc.matmul(q, w), k.swapaxes(-1, -2))
    # Concat: tanh([q_i; k_j]) . w splits into a query term and a key term
    nh = q.shape[1]
    wq = w[:, :dh].reshape(nh, dh, 1)
    wk = w[:, dh:].reshape(nh, dh, 1)
    return dc.matmul(dc.tanh(q), wq) + dc.matmul(dc.tanh(k), wk).swapaxes(-1, -2)


def single_head_scores(kind, q, k, w=None) -> Tensor:
    """Scores for one head with ``q``, ``k`` shaped ``(L, d_h)`` and column-vector ``w``."""
    q, k = dc._as_tensor(q), dc._as_tensor(k)
    if q.ndim != 2 or q.shape != k.shape:
        raise DimensionError(f"expected equal (length, head_dim) inputs, got {q.shape} and {k.shape}")
    l, dh = q.shape
    w4 = None
    if w is not None:
        w = dc._as_tensor(w)
        kind = AttentionKind(kind)
        w4 = w.reshape(1, dh, dh) if kind is AttentionKind.BILINEAR else w.reshape(1, -1)
    return attention_scores(kind, q.reshape(1, 1, l, dh), k.reshape(1, 1, l, dh), w4).reshape(l, l)


class Attention(Module):
    """Multi-head self-attention with shared Q/K/V/output projections and per-kind score weights."""

    def __init__(self, d_m: int, num_heads: int, kinds, rng, dropout: float = 0.0, dropout_rng=None):
        self.kinds = tuple(AttentionKind(k) for k in kinds)
        self.num_heads = num_heads
        self.wq = dc.parameter(dc.glorot_uniform(rng, d_m, d_m))
        self.wk = dc.parameter(dc.glorot_uniform(rng, d_m, d_m))
        self.wv = dc.parameter(dc.glorot_uniform(rng, d_m, d_m))
        self.out = Linear(d_m, d_m, rng)
        dh = d_m // num_heads
        self.score = {}
        for kind in self.kinds:
            shape = score_param_shape(kind, num_heads, dh)
            if shape is not None:
                fan_out = dh if kind is AttentionKind.BILINEAR else 1
                self.score[kind.value] = dc.parameter(dc.glorot_uniform(rng, shape[-1], fan_out, shape))
        self.dropout = dropout
        self._rng = dropout_rng

    def _split(self, x: Tensor) -> Tensor:
        n, l, d = x.shape
        return x.reshape(n, l, self.num_heads, d // self.num_heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, active) -> Tensor:
        n, l, d = x.shape
        q = self._split(dc.matmul(x, self.wq))
        k = self._split(dc.matmul(x, self.wk))
        v = self._split(dc.matmul(x, self.wv))

        def head_outputs(idx):
            kind = self.kinds[idx]
            s = attention_scores(kind, q, k, self.score.get(kind.value))
            a = dc.dropout(dc.softmax(s, axis=-1), self.dropout, self._rng, self.training)
            return dc.matmul(a, v)

        heads = mix(active, head_outputs)
        return self.out(heads.transpose(0, 2, 1, 3).reshape(n, l, d))


# ---------------------------------------------------------------------------
# feed-forward
# ---------------------------------------------------------------------------


def ffn(x: Tensor, up: Tensor, down: Tensor, down_bias: Tensor | None, act) -> Tensor:
    """``down(act(x @ up))``; ``up`` is ``(d_m, k d_m)`` and ``down`` ``(k d_m, d_m)``."""
    h = apply_activation(act, dc.matmul(x, up))
    y = dc.matmul(h, down)
    return y if down_bias is None else y + down_bias


class FFNBranch(Module):
    """One width factor: bias-free up projection, activation mixture, down projection."""

    def __init__(self, d_m: int, k: float, activations, rng, dropout: float = 0.0, dropout_rng=None):
        self.k = float(k)
        width = ffn_width(d_m, k)
        self.up = dc.parameter(dc.glorot_uniform(rng, d_m, width))
        self.down = Linear(width, d_m, rng)
        self.activations = tuple(ActivationKind(a) for a in activations)
        self.dropout = dropout
        self._rng = dropout_rng

    def __call__(self, x: Tensor, act_active) -> Tensor:
        h = dc.matmul(x, self.up)
        h = mix(act_active, lambda i: apply_activation(self.activations[i], h))
        h = dc.dropout(h, self.dropout, self._rng, self.training)
        return self.down(h)


# ---------------------------------------------------------------------------
# encoding branches
# ---------------------------------------------------------------------------

_CONV_SIZES = {EncodingKind.CONV_1: 1, EncodingKind.CONV_3: 3, EncodingKind.CONV_5: 5}


class Encoding(Module):
    """Null, Skip, or depthwise-then-pointwise convolution along the sequence axis."""

    def __init__(self, kind, d_m: int, rng):
        self.kind = EncodingKind(kind)
        ks = _CONV_SIZES.get(self.kind)
        if ks is not None:
            self.depthwise = dc.parameter(dc.glorot_uniform(rng, ks, ks, (ks, d_m)))
            self.pointwise = Linear(d_m, d_m, rng)

    def identity_init(self) -> None:
        if self.kind in _CONV_SIZES:
            ks = self.depthwise.shape[0]
            self.depthwise.data[...] = 0.0
            self.depthwise.data[ks // 2] = 1.0
            self.pointwise.weight.data[...] = np.eye(self.pointwise.weight.shape[0])
            self.pointwise.bias.data[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor | None:
        """Branch output; ``None`` stands for the exact zero produced by Null."""
        if self.kind is EncodingKind.NULL:
            return None
        if self.kind is EncodingKind.SKIP:
            return x
        return self.pointwise(dc.conv1d(x, self.depthwise))


def apply_encoding(kind, x, module: Encoding | None = None) -> Tensor:
    kind = EncodingKind(kind)
    x = dc._as_tensor(x)
    if kind is EncodingKind.NULL:
        return dc._as_tensor(np.zeros(x.shape))
    if kind is EncodingKind.SKIP:
        return x
    if module is None or module.kind is not kind:
        raise ConfigError(f"{kind.value} needs its convolution weights")
    return module(x)


# ---------------------------------------------------------------------------
# candidate mixing
# ---------------------------------------------------------------------------


class FixedNode:
    """Slot with a single candidate; contributes its output unscaled."""

    def active(self):
        return [(0, None)]


def mix(active, fn) -> Tensor | None:
    """Weighted sum ``sum_j w_j fn(j)``; a ``None`` weight means exactly 1."""
    total = None
    for idx, w in active:
        out = fn(idx)
        if out is None:
            continue
        term = out if w is None else out * w
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# blocks and models
# ---------------------------------------------------------------------------


class Block(Module):
    def __init__(self, cfg: ModelConfig, choices: dict, rng, dropout_rng=None):
        self.choices = {s: tuple(choices[s]) for s in SLOTS}
        d = cfg.d_m
        self.ln_attn = LayerNorm(d)
        self.ln_ffn = LayerNorm(d)
        self.attn = Attention(d, cfg.num_heads, self.choices["attn"], rng, cfg.dropout, dropout_rng)
        self.enc_attn = {EncodingKind(e).value: Encoding(e, d, rng) for e in self.choices["enc_attn"]}
        self.enc_ffn = {EncodingKind(e).value: Encoding(e, d, rng) for e in self.choices["enc_ffn"]}
        self.ffn = {
            f"k{float(k):g}": FFNBranch(d, k, self.choices["act"], rng, cfg.dropout, dropout_rng)
            for k in self.choices["k"]
        }
        self._nodes = {s: FixedNode() for s in SLOTS}

    def set_node(self, slot: str, node) -> None:
        self._nodes[slot] = node

    def node(self, slot: str):
        return self._nodes[slot]

    def __call__(self, x: Tensor) -> Tensor:
        enc_a = list(self.enc_attn.values())
        enc_f = list(self.enc_ffn.values())
        branches = list(self.ffn.values())
        att = self.attn(self.ln_attn(x), self._nodes["attn"].active())
        enc = mix(self._nodes["enc_attn"].active(), lambda i: enc_a[i](x))
        x1 = att if enc is None else att + enc
        xf = self.ln_ffn(x1)
        act_active = self._nodes["act"].active()
        ff = mix(self._nodes["k"].active(), lambda i: branches[i](xf, act_active))
        enc = mix(self._nodes["enc_ffn"].active(), lambda i: enc_f[i](x1))
        return ff if enc is None else ff + enc


def block_forward(block: Block, x) -> Tensor:
    return block(dc._as_tensor(x))


def patch_indices(lookback: int, patch_len: int, stride: int) -> np.ndarray:
    count = num_patches(lookback, patch_len, stride)
    return np.arange(count)[:, None] * stride + np.arange(patch_len)[None, :]


class PatchEmbed(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self._index = patch_indices(cfg.lookback, cfg.patch_len, cfg.patch_stride)
        self.proj = Linear(cfg.patch_len, cfg.d_m, rng)
        self.pos = dc.parameter(dc.glorot_uniform(rng, len(self._index), cfg.d_m))

    def __call__(self, series: np.ndarray) -> Tensor:
        """``(N, T_L)`` array -> ``(N, l, d_m)`` token tensor."""
        patches = series[:, self._index]
        return self.proj(dc._as_tensor(patches)) + self.pos


def patch_embed(x, embed: PatchEmbed) -> Tensor:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return embed(x)


class Backbone(Module):
    """Patch embedding, blocks and flatten-linear head shared by all model flavours."""

    def __init__(self, cfg: ModelConfig, block_choices: list[dict], seed=0):
        self.cfg = cfg
        init_rng, drop_rng = dc.spawn_rngs(dc.make_rng(seed), 2)
        self._dropout_rng = drop_rng
        self.embed = PatchEmbed(cfg, init_rng)
        self.blocks = [Block(cfg, ch, init_rng, drop_rng) for ch in block_choices]
        self.head = Linear(cfg.num_patches * cfg.d_m, cfg.horizon, init_rng)

    def forward(self, x) -> Tensor:
        """``(batch, channels, T_L)`` -> ``(batch, channels, T_P)``, channels share weights."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != self.cfg.lookback:
            raise DimensionError(f"expected (batch, channels, {self.cfg.lookback}), got {x.shape}")
        b, c, t = x.shape
        series = x.reshape(b * c, t)
        if self.cfg.instance_norm:
            mu = series.mean(axis=1, keepdims=True)
            sd = np.sqrt(series.var(axis=1, keepdims=True) + 1e-5)
            series = (series - mu) / sd
        h = self.embed(series)
        for blk in self.blocks:
            h = blk(h)
        n, l, d = h.shape
        y = self.head(h.reshape(n, l * d))
        if self.cfg.instance_norm:
            y = y * sd + mu
        return y.reshape(b, c, self.cfg.horizon)

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            with dc.no_grad():
                return self.forward(x).data
        finally:
            self.train(was_training)


class ForecastModel(Backbone):
    def __init__(self, cfg: ModelConfig, spec: ArchitectureSpec, seed=0):
        if len(spec.blocks) != cfg.num_blocks:
            raise ConfigError(f"spec has {len(spec.blocks)} blocks, config expects {cfg.num_blocks}")
        self.spec = spec
        super().__init__(cfg, [{s: (b.get(s),) for s in SLOTS} for b in spec.blocks], seed)


def forecast(model: Backbone, x) -> Tensor:
    return model.forward(x)


def spec_block(block: Block) -> BlockSpec:
    """BlockSpec of a block whose every slot holds a single candidate."""
    return BlockSpec(**{s: block.choices[s][0] for s in SLOTS})

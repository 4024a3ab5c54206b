"""Differentiable super-network over the block search space."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import StateError, UsageError
from .nnops import Backbone, ForecastModel, ModelConfig
from .searchspace import (
    SLOTS,
    ArchitectureSpec,
    BlockSpec,
    SearchSpaceConfig,
    full_space,
)


def _label(value) -> str:
    return f"{value:g}" if isinstance(value, float) else value.value


class MixedNode:
    """Softmax-weighted mixture over the unmasked candidates of one slot.

    ``alpha`` is a tensor so the DARTS baseline can differentiate through it;
    AB-DARTS never puts it in an optimizer.
    """

    def __init__(self, node_id: int, slot: str, candidates, block_index: int | None):
        self.node_id = node_id
        self.slot = slot
        self.block_index = block_index
        self.candidates = tuple(candidates)
        self.alpha = dc.Tensor(np.zeros(len(self.candidates)), requires_grad=True, name=f"alpha.{node_id}")
        self.mask = np.ones(len(self.candidates), dtype=bool)
        self.discretized = len(self.candidates) == 1

    @property
    def name(self) -> str:
        where = "shared" if self.block_index is None else f"block{self.block_index}"
        return f"{where}.{self.slot}"

    @property
    def labels(self) -> list[str]:
        return [_label(c) for c in self.candidates]

    def unmasked(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def effective_weights(self) -> np.ndarray:
        idx = self.unmasked()
        if idx.size == 0:
            raise StateError(f"node {self.name} has every candidate masked")
        w = np.zeros(len(self.candidates))
        a = self.alpha.data[idx]
        e = np.exp(a - a.max())
        w[idx] = e / e.sum()
        return w

    def active(self):
        idx = self.unmasked()
        if idx.size == 0:
            raise StateError(f"node {self.name} has every candidate masked")
        if idx.size == 1:
            return [(int(idx[0]), None)]
        w = dc.softmax(self.alpha[idx])
        return [(int(j), w[n]) for n, j in enumerate(idx)]

    def survivor(self):
        idx = self.unmasked()
        if idx.size != 1:
            raise StateError(f"node {self.name} is not discretized ({idx.size} candidates remain)")
        return self.candidates[int(idx[0])]


def mixed_forward(node: MixedNode, x, candidate_fns) -> dc.Tensor:
    """Weighted sum of ``candidate_fns[j](x)`` over the node's unmasked candidates."""
    from .nnops import mix

    x = dc._as_tensor(x)
    out = mix(node.active(), lambda j: candidate_fns[j](x))
    return out if out is not None else dc._as_tensor(np.zeros(x.shape))


@dataclass
class NodeRef:
    node_id: int
    name: str
    slot: str
    labels: list


class HyperNetwork(Backbone):
    def __init__(self, cfg: ModelConfig, space: SearchSpaceConfig | None = None, seed=0):
        space = space or full_space()
        self.space = space
        choices = {s: space.allowed[s] for s in SLOTS}
        super().__init__(cfg, [choices] * cfg.num_blocks, seed)
        nodes = []
        if space.macro:
            for b, blk in enumerate(self.blocks):
                for slot in SLOTS:
                    node = MixedNode(len(nodes), slot, choices[slot], b)
                    nodes.append(node)
                    blk.set_node(slot, node)
        else:
            for slot in SLOTS:
                node = MixedNode(len(nodes), slot, choices[slot], None)
                nodes.append(node)
                for blk in self.blocks:
                    blk.set_node(slot, node)
        self._nodes = nodes

    @property
    def nodes(self) -> list[MixedNode]:
        return self._nodes

    def node(self, node_id: int) -> MixedNode:
        try:
            return self._nodes[node_id]
        except IndexError:
            raise UsageError(f"no node {node_id}; hyper-network has {len(self._nodes)}") from None

    def alphas(self) -> list[dc.Tensor]:
        return [n.alpha for n in self._nodes]

    def weight_parameters(self) -> list[dc.Tensor]:
        return self.parameters()

    def is_discretized(self) -> bool:
        return all(n.mask.sum() == 1 for n in self._nodes)


@contextlib.contextmanager
def mask_operation(model: HyperNetwork, node_id: int, op_index: int):
    """Temporarily evaluate the network with one candidate removed from a node."""
    node = model.node(node_id)
    if not 0 <= op_index < len(node.candidates):
        raise UsageError(f"node {node.name} has no candidate {op_index}")
    if not node.mask[op_index]:
        raise StateError(f"candidate {op_index} on node {node.name} is already masked")
    if node.mask.sum() < 2:
        raise StateError(f"cannot mask the last candidate of node {node.name}")
    node.mask[op_index] = False
    try:
        yield model
    finally:
        node.mask[op_index] = True


def discretize_node(model: HyperNetwork, node_id: int, keep_index: int) -> None:
    node = model.node(node_id)
    if not 0 <= keep_index < len(node.candidates):
        raise UsageError(f"node {node.name} has no candidate {keep_index}")
    if not node.mask[keep_index]:
        raise UsageError(f"candidate {keep_index} on node {node.name} is masked")
    node.mask[:] = False
    node.mask[keep_index] = True
    node.discretized = True


def extract_spec(model: HyperNetwork) -> ArchitectureSpec:
    blocks = []
    for blk in model.blocks:
        blocks.append(BlockSpec(**{s: blk.node(s).survivor() for s in SLOTS}))
    return ArchitectureSpec(tuple(blocks))


def argmax_alpha_spec(model: HyperNetwork) -> ArchitectureSpec:
    """Per-node argmax of alpha over unmasked candidates; ties go to the lowest index."""
    blocks = []
    for blk in model.blocks:
        values = {}
        for s in SLOTS:
            node = blk.node(s)
            a = np.where(node.mask, node.alpha.data, -np.inf)
            values[s] = node.candidates[int(np.argmax(a))]
        blocks.append(BlockSpec(**values))
    return ArchitectureSpec(tuple(blocks))


def to_subnetwork(model: HyperNetwork, seed=0) -> ForecastModel:
    """ForecastModel for the extracted spec carrying the hyper-network's surviving weights."""
    spec = extract_spec(model)
    sub = ForecastModel(model.cfg, spec, seed)
    source = dict(model.named_parameters())
    sub.load_state_dict({name: source[name].data for name, _ in sub.named_parameters()})
    return sub

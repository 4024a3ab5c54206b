import numpy as np
import pytest

from tsnas import diffcore as dc
from tsnas.errors import StateError, UsageError
from tsnas.hypernet import (
    HyperNetwork,
    MixedNode,
    argmax_alpha_spec,
    discretize_node,
    extract_spec,
    mask_operation,
    mixed_forward,
    to_subnetwork,
)
from tsnas.nnops import ModelConfig
from tsnas.searchspace import SLOTS, full_space, reduced_space, vanilla_spec

CFG = ModelConfig(d_m=16, num_blocks=2, num_heads=2, patch_len=8, patch_stride=4, lookback=32, horizon=4,
                  dropout=0.0)


@pytest.fixture
def net():
    return HyperNetwork(CFG, full_space(), seed=0)


def test_macro_nodes_are_per_block_in_slot_order(net):
    assert [n.name for n in net.nodes[:5]] == [f"block0.{s}" for s in SLOTS]
    assert len(net.nodes) == 10
    assert [len(n.candidates) for n in net.nodes[:5]] == [5, 5, 5, 5, 4]


def test_micro_nodes_are_shared():
    hn = HyperNetwork(CFG, reduced_space("s1"), seed=0)
    assert len(hn.nodes) == 5
    assert hn.blocks[0].node("attn") is hn.blocks[1].node("attn")


def test_s4_hypernet_is_already_discrete():
    hn = HyperNetwork(CFG, reduced_space("s4"), seed=0)
    assert hn.is_discretized()
    assert extract_spec(hn) == vanilla_spec(2)


def test_alpha_initialized_uniform(net):
    for node in net.nodes:
        np.testing.assert_allclose(node.effective_weights(), 1.0 / len(node.candidates))


def test_masked_softmax_renormalizes():
    node = MixedNode(0, "attn", ["a", "b", "c"], 0)
    node.alpha.data[:] = [0.0, 1.0, 2.0]
    node.mask[1] = False
    w = node.effective_weights()
    assert w[1] == 0.0
    assert w.sum() == pytest.approx(1.0)
    assert w[2] / w[0] == pytest.approx(np.e ** 2)


def test_mixed_forward_is_weighted_sum():
    node = MixedNode(0, "act", ["x", "y"], 0)
    node.alpha.data[:] = [0.3, -0.2]
    x = dc.Tensor(np.arange(4.0))
    out = mixed_forward(node, x, [lambda t: t * 2.0, lambda t: t * 5.0]).data
    w = node.effective_weights()
    np.testing.assert_allclose(out, x.data * (2 * w[0] + 5 * w[1]))


def test_mask_operation_restores_mask_even_on_error(net):
    with pytest.raises(RuntimeError), mask_operation(net, 1, 2):
        assert not net.node(1).mask[2]
        raise RuntimeError("boom")
    assert net.node(1).mask.all()


def test_mask_operation_changes_output(net):
    x = np.random.default_rng(0).standard_normal((2, 1, 32))
    base = net.predict(x)
    with mask_operation(net, 1, 0):
        masked = net.predict(x)
    assert not np.allclose(base, masked)
    np.testing.assert_array_equal(net.predict(x), base)


def test_mask_last_candidate_and_double_mask(net):
    discretize_node(net, 0, 3)
    with pytest.raises(StateError), mask_operation(net, 0, 3):
        pass
    with pytest.raises(StateError), mask_operation(net, 0, 1):
        pass


def test_bad_node_and_candidate(net):
    with pytest.raises(UsageError):
        net.node(99)
    with pytest.raises(UsageError):
        discretize_node(net, 0, 7)


def test_extract_requires_full_discretization(net):
    with pytest.raises(StateError):
        extract_spec(net)


def test_argmax_alpha_spec_ties_to_lowest_index(net):
    spec = argmax_alpha_spec(net)
    assert spec.blocks[0].enc_attn.value == "Null"
    net.node(1).alpha.data[:] = [0, 0, 3, 3, 0]
    assert argmax_alpha_spec(net).blocks[0].attn.value == "Bilinear_Attn"


def test_alpha_gradients_flow(net):
    x = np.random.default_rng(0).standard_normal((2, 1, 32))
    y = np.zeros((2, 1, 4))
    dc.backward(dc.mse_loss(net(x), y))
    assert all(a.grad is not None and np.abs(a.grad).sum() > 0 for a in net.alphas())


def test_discretized_candidates_receive_no_gradient(net):
    discretize_node(net, 1, 0)  # keep Dot_Attn on block 0
    x = np.random.default_rng(0).standard_normal((2, 1, 32))
    dc.backward(dc.mse_loss(net(x), np.zeros((2, 1, 4))))
    score = net.blocks[0].attn.score
    assert all(p.grad is None for p in score.values())
    assert net.blocks[1].attn.score["EP_Attn"].grad is not None
    dc.AdamW.zero_grad(net.parameters() + net.alphas())


def test_to_subnetwork_copies_weights(net):
    rng = np.random.default_rng(1)
    for node in net.nodes:
        discretize_node(net, node.node_id, int(rng.integers(len(node.candidates))))
    sub = to_subnetwork(net, seed=5)
    x = rng.standard_normal((3, 1, 32))
    np.testing.assert_array_equal(sub.predict(x), net.predict(x))
    assert sub.num_parameters() < net.num_parameters()

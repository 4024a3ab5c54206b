import numpy as np
import pytest

from tsnas import diffcore as dc
from tsnas.errors import ConfigError, DimensionError, NumericError, UsageError
from tsnas.gradcheck import elementwise_check


def leaf(a):
    return dc.Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_add_mul_broadcast_gradients():
    a = leaf(np.ones((2, 3)))
    b = leaf([1.0, 2.0, 3.0])
    loss = (a * b + b).sum()
    dc.backward(loss)
    np.testing.assert_array_equal(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
    np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])


def test_gradient_accumulates_over_reuse():
    x = leaf([2.0])
    dc.backward((x * x * x).sum())
    assert x.grad[0] == pytest.approx(12.0)


def test_second_backward_raises():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    dc.backward(loss)
    with pytest.raises(UsageError):
        dc.backward(loss)


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(UsageError):
        dc.backward(x * 2.0)


def test_backward_without_grad_inputs():
    with pytest.raises(UsageError):
        dc.backward(dc.Tensor([1.0]).sum())


def test_non_finite_leaf_rejected():
    with pytest.raises(NumericError):
        dc.Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        dc.Tensor([np.inf])


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = np.array([[1000.0, 1001.0, 999.0], [0.0, 0.0, 0.0]])
    s = dc.softmax(dc.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0)
    np.testing.assert_allclose(s[0], dc.softmax(dc.Tensor(x[0] - 1000.0)).data)


def test_matmul_shape_errors_name_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((4, 5))))
    with pytest.raises(DimensionError):
        dc.matmul(dc.Tensor(np.ones(3)), dc.Tensor(np.ones((3, 1))))


def test_conv1d_rejects_even_kernel():
    with pytest.raises(ConfigError):
        dc.conv1d(dc.Tensor(np.ones((1, 4, 2))), dc.Tensor(np.ones((2, 2))))


def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 6, 3))
    w = np.zeros((3, 3))
    w[1] = 1.0
    np.testing.assert_array_equal(dc.conv1d(dc.Tensor(x), dc.Tensor(w)).data, x)


def test_conv1d_zero_padding_at_edges():
    x = np.arange(1.0, 5.0).reshape(1, 4, 1)
    w = np.ones((3, 1))
    np.testing.assert_array_equal(dc.conv1d(dc.Tensor(x), dc.Tensor(w)).data.ravel(), [3.0, 6.0, 9.0, 7.0])


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    before = len(dc.current_tape().entries)
    with dc.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    assert len(dc.current_tape().entries) == before


def test_getitem_scatter_gradient():
    x = leaf(np.arange(6.0))
    dc.backward(x[np.array([0, 0, 3])].sum())
    np.testing.assert_array_equal(x.grad, [2, 0, 0, 1, 0, 0])


def test_layer_norm_normalizes():
    x = np.random.default_rng(1).standard_normal((4, 7)) * 5 + 3
    out = dc.layer_norm(dc.Tensor(x), dc.Tensor(np.ones(7)), dc.Tensor(np.zeros(7))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=-1), 1.0, rtol=1e-5)


def test_dropout_is_identity_in_eval_and_scaled_in_training():
    x = dc.Tensor(np.ones((1000,)))
    assert dc.dropout(x, 0.5, np.random.default_rng(0), training=False) is x
    y = dc.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert 400 < (y > 0).sum() < 600


def test_rng_streams_reproducible():
    a = dc.spawn_rngs(dc.make_rng(7), 2)
    b = dc.spawn_rngs(dc.make_rng(7), 2)
    assert a[1].random() == b[1].random()


@pytest.mark.parametrize("fn", [dc.tanh, dc.sigmoid, dc.exp, dc.gelu, dc.swish])
def test_smooth_unary_gradients(fn):
    rng = np.random.default_rng(2)
    assert elementwise_check(fn, [rng.standard_normal((3, 3))], rng) < 1e-6


# -- optimizer ----------------------------------------------------------------


def test_schedule_shape():
    s = dc.LinearWarmupDecay(100, 0.06)
    assert s.warmup_steps == 6
    assert s.factor(0) == 0.0
    assert s.factor(3) == pytest.approx(0.5)
    assert s.factor(6) == pytest.approx(1.0)
    assert s.factor(100) == 0.0
    assert all(s.factor(i) >= s.factor(i + 1) for i in range(6, 100))


def test_adamw_matches_reference_step():
    p = np.array([1.0, -2.0])
    g = np.array([0.5, 0.25])
    st = dc._AdamState(np.zeros(2), np.zeros(2))
    dc.adamw_step(p, g, st, lr=0.1, weight_decay=0.01)
    # first bias-corrected Adam step moves by lr * sign(g) (up to eps), after decay
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-12)


def test_adamw_skips_params_without_grad_and_rejects_nan_grads():
    a, b = leaf([1.0]), leaf([1.0])
    opt = dc.AdamW(lr=0.1)
    a.grad = np.array([1.0])
    opt.step([a, b])
    assert a.data[0] != 1.0 and b.data[0] == 1.0
    assert b not in opt.state
    a.grad = np.array([np.nan])
    with pytest.raises(NumericError):
        opt.step([a])


def test_adamw_minimizes_quadratic():
    x = leaf([5.0, -3.0])
    opt = dc.AdamW(lr=0.1, weight_decay=0.0)
    for _ in range(300):
        dc.backward((x * x).sum())
        opt.step([x])
        dc.AdamW.zero_grad([x])
    assert np.abs(x.data).max() < 0.05


def test_adamw_rejects_bad_lr():
    with pytest.raises(ConfigError):
        dc.AdamW(lr=0.0)

import numpy as np
import pytest

from tsnas import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")


@pytest.fixture
def arrays():
    rng = np.random.default_rng(0)
    q = rng.standard_normal((2, 3, 6, 4)) * 2
    k = rng.standard_normal((2, 3, 6, 4)) * 2
    w = rng.standard_normal((3, 4))
    g = rng.standard_normal((2, 3, 6, 6))
    return q, k, w, g


@pytest.mark.parametrize("mode", [K.PAIR_PRODUCT, K.PAIR_DIFFERENCE])
def test_pair_scores_numba_equals_numpy(arrays, mode):
    q, k, w, g = arrays
    np.testing.assert_allclose(K.pair_tanh_scores_numba(q, k, w, mode), K.pair_tanh_scores_numpy(q, k, w, mode),
                               rtol=1e-12, atol=1e-13)
    for a, b in zip(K.pair_tanh_scores_grad_numba(q, k, w, g, mode),
                    K.pair_tanh_scores_grad_numpy(q, k, w, g, mode)):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("ks", [1, 3, 5])
def test_depthwise_conv_numba_equals_numpy(ks):
    rng = np.random.default_rng(ks)
    x = rng.standard_normal((3, 7, 5))
    w = rng.standard_normal((ks, 5))
    g = rng.standard_normal((3, 7, 5))
    np.testing.assert_allclose(K.depthwise_conv_numba(x, w), K.depthwise_conv_numpy(x, w), atol=1e-13)
    for a, b in zip(K.depthwise_conv_grad_numba(x, w, g), K.depthwise_conv_grad_numpy(x, w, g)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_series_tanh_branch_accuracy():
    # exercise the small-argument series inside the kernel
    q = np.full((1, 1, 1, 3), 1e-3)
    k = np.array([[[[1e-3, 5.0, -2e-3]]]])
    w = np.ones((1, 3))
    got = K.pair_tanh_scores_numba(q, k, w, K.PAIR_PRODUCT)[0, 0, 0, 0]
    assert got == pytest.approx(np.tanh(q * k).sum(), rel=1e-14)


def test_dispatch_flag_selects_backend(monkeypatch, arrays):
    q, k, w, _ = arrays
    monkeypatch.setattr(K, "USE_NUMBA", False)
    a = K.pair_tanh_scores(q, k, w, K.PAIR_PRODUCT)
    monkeypatch.setattr(K, "USE_NUMBA", True)
    b = K.pair_tanh_scores(q, k, w, K.PAIR_PRODUCT)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_non_contiguous_inputs_accepted(arrays):
    q, k, w, _ = arrays
    qt = np.swapaxes(np.swapaxes(q, 2, 3).copy(), 2, 3)
    assert not qt.flags.c_contiguous
    np.testing.assert_allclose(K.pair_tanh_scores(qt, k, w, 0), K.pair_tanh_scores_numpy(q, k, w, 0), rtol=1e-12)

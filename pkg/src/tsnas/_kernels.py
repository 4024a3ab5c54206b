"""Hot numeric kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used when numba imports cleanly and the environment
variable ``TSNAS_NUMBA`` is not set to ``0``.  Both paths are kept
importable as ``*_numba`` / ``*_numpy`` so tests and the benchmark can
compare them directly.

Pairwise score kernels work on arrays shaped ``(B, H, L, D)`` for queries
and keys and ``(H, D)`` for the projection vector; ``mode`` selects the
pair combination (``PAIR_PRODUCT``: q*k, ``PAIR_DIFFERENCE``: q-k).
"""

import math
import os

import numpy as np

PAIR_PRODUCT = 0
PAIR_DIFFERENCE = 1

try:
    import numba  # noqa: F401
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("TSNAS_NUMBA", "1") != "0"


# --------------------------------------------------------------------------
# numpy fallback
# --------------------------------------------------------------------------


def _pair_numpy(q, k, mode):
    if mode == PAIR_PRODUCT:
        return q[:, :, :, None, :] * k[:, :, None, :, :]
    return q[:, :, :, None, :] - k[:, :, None, :, :]


def pair_tanh_scores_numpy(q, k, w, mode):
    t = np.tanh(_pair_numpy(q, k, mode))
    return np.matmul(t, w[None, :, None, :, None])[..., 0]


def pair_tanh_scores_grad_numpy(q, k, w, g, mode):
    t = np.tanh(_pair_numpy(q, k, mode))
    gw = np.einsum("bhij,bhijd->hd", g, t)
    gz = g[..., None] * w[None, :, None, None, :] * (1.0 - t * t)
    if mode == PAIR_PRODUCT:
        gq = np.einsum("bhijd,bhjd->bhid", gz, k)
        gk = np.einsum("bhijd,bhid->bhjd", gz, q)
    else:
        gq = gz.sum(axis=3)
        gk = -gz.sum(axis=2)
    return gq, gk, gw


def depthwise_conv_numpy(x, w):
    n, length, d = x.shape
    ks = w.shape[0]
    pad = (ks - 1) // 2
    xp = np.zeros((n, length + 2 * pad, d))
    xp[:, pad:pad + length] = x
    out = np.zeros_like(x)
    for j in range(ks):
        out += xp[:, j:j + length] * w[j]
    return out


def depthwise_conv_grad_numpy(x, w, g):
    n, length, d = x.shape
    ks = w.shape[0]
    pad = (ks - 1) // 2
    xp = np.zeros((n, length + 2 * pad, d))
    xp[:, pad:pad + length] = x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for j in range(ks):
        gw[j] = (xp[:, j:j + length] * g).sum(axis=(0, 1))
        gxp[:, j:j + length] += g * w[j]
    return gxp[:, pad:pad + length].copy(), gw


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True, fastmath=True, inline="always")
    def _tanh(z):
        # branch-free so the d-loop vectorizes; odd series below 0.01 avoids
        # cancellation in (1 - e) / (1 + e)
        a = abs(z)
        z2 = z * z
        series = z * (1.0 - z2 * (1.0 / 3.0 - z2 * (2.0 / 15.0 - z2 * (17.0 / 315.0))))
        e = np.exp(-2.0 * a)
        ratio = math.copysign((1.0 - e) / (1.0 + e), z)
        return series if a < 0.01 else ratio

    @njit(cache=True, fastmath=True)
    def _product_scores(q, k, w):
        nb, nh, nl, nd = q.shape
        out = np.zeros((nb, nh, nl, nl))
        for b in range(nb):
            for h in range(nh):
                for i in range(nl):
                    for j in range(nl):
                        s = 0.0
                        for d in range(nd):
                            s += _tanh(q[b, h, i, d] * k[b, h, j, d]) * w[h, d]
                        out[b, h, i, j] = s
        return out

    @njit(cache=True, fastmath=True)
    def _difference_scores(q, k, w):
        nb, nh, nl, nd = q.shape
        out = np.zeros((nb, nh, nl, nl))
        for b in range(nb):
            for h in range(nh):
                for i in range(nl):
                    for j in range(nl):
                        s = 0.0
                        for d in range(nd):
                            s += _tanh(q[b, h, i, d] - k[b, h, j, d]) * w[h, d]
                        out[b, h, i, j] = s
        return out

    @njit(cache=True, fastmath=True)
    def _product_scores_grad(q, k, w, g):
        nb, nh, nl, nd = q.shape
        gq = np.zeros_like(q)
        gk = np.zeros_like(k)
        gw = np.zeros_like(w)
        for b in range(nb):
            for h in range(nh):
                for i in range(nl):
                    for j in range(nl):
                        gij = g[b, h, i, j]
                        for d in range(nd):
                            t = _tanh(q[b, h, i, d] * k[b, h, j, d])
                            gz = gij * w[h, d] * (1.0 - t * t)
                            gq[b, h, i, d] += gz * k[b, h, j, d]
                            gk[b, h, j, d] += gz * q[b, h, i, d]
                            gw[h, d] += gij * t
        return gq, gk, gw

    @njit(cache=True, fastmath=True)
    def _difference_scores_grad(q, k, w, g):
        nb, nh, nl, nd = q.shape
        gq = np.zeros_like(q)
        gk = np.zeros_like(k)
        gw = np.zeros_like(w)
        for b in range(nb):
            for h in range(nh):
                for i in range(nl):
                    for j in range(nl):
                        gij = g[b, h, i, j]
                        for d in range(nd):
                            t = _tanh(q[b, h, i, d] - k[b, h, j, d])
                            gz = gij * w[h, d] * (1.0 - t * t)
                            gq[b, h, i, d] += gz
                            gk[b, h, j, d] -= gz
                            gw[h, d] += gij * t
        return gq, gk, gw

    def pair_tanh_scores_numba(q, k, w, mode):
        if mode == PAIR_PRODUCT:
            return _product_scores(q, k, w)
        return _difference_scores(q, k, w)

    def pair_tanh_scores_grad_numba(q, k, w, g, mode):
        if mode == PAIR_PRODUCT:
            return _product_scores_grad(q, k, w, g)
        return _difference_scores_grad(q, k, w, g)

    @njit(cache=True)
    def depthwise_conv_numba(x, w):
        n, length, d = x.shape
        ks = w.shape[0]
        pad = (ks - 1) // 2
        out = np.zeros_like(x)
        for b in range(n):
            for t in range(length):
                for j in range(ks):
                    src = t + j - pad
                    if src < 0 or src >= length:
                        continue
                    for c in range(d):
                        out[b, t, c] += w[j, c] * x[b, src, c]
        return out

    @njit(cache=True)
    def depthwise_conv_grad_numba(x, w, g):
        n, length, d = x.shape
        ks = w.shape[0]
        pad = (ks - 1) // 2
        gx = np.zeros_like(x)
        gw = np.zeros_like(w)
        for b in range(n):
            for t in range(length):
                for j in range(ks):
                    src = t + j - pad
                    if src < 0 or src >= length:
                        continue
                    for c in range(d):
                        gw[j, c] += g[b, t, c] * x[b, src, c]
                        gx[b, src, c] += g[b, t, c] * w[j, c]
        return gx, gw

else:  # pragma: no cover
    pair_tanh_scores_numba = pair_tanh_scores_numpy
    pair_tanh_scores_grad_numba = pair_tanh_scores_grad_numpy
    depthwise_conv_numba = depthwise_conv_numpy
    depthwise_conv_grad_numba = depthwise_conv_grad_numpy


def _contig(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def pair_tanh_scores(q, k, w, mode):
    if USE_NUMBA:
        return pair_tanh_scores_numba(*_contig(q, k, w), mode)
    return pair_tanh_scores_numpy(q, k, w, mode)


def pair_tanh_scores_grad(q, k, w, g, mode):
    if USE_NUMBA:
        return pair_tanh_scores_grad_numba(*_contig(q, k, w, g), mode)
    return pair_tanh_scores_grad_numpy(q, k, w, g, mode)


def depthwise_conv(x, w):
    if USE_NUMBA:
        return depthwise_conv_numba(*_contig(x, w))
    return depthwise_conv_numpy(x, w)


def depthwise_conv_grad(x, w, g):
    if USE_NUMBA:
        return depthwise_conv_grad_numba(*_contig(x, w, g))
    return depthwise_conv_grad_numpy(x, w, g)

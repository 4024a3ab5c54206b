"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeats 20] [--json out.json]

Each kernel is called once before timing so JIT compilation is excluded.
Shapes follow the toy search config (batch 32, 4 heads, 15 patches, d_h 8;
depthwise conv on 32 sequences of 15 x 32).  Also reports one hyper-network
training step with each backend selected.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from tsnas import _kernels as K


def best_of(fn, repeats, number=5):
    fn()
    return min(timeit.repeat(fn, number=number, repeat=repeats)) / number


def kernel_cases(rng):
    q = rng.standard_normal((32, 4, 15, 8))
    k = rng.standard_normal((32, 4, 15, 8))
    w = rng.standard_normal((4, 8))
    g = rng.standard_normal((32, 4, 15, 15))
    x = rng.standard_normal((32, 15, 32))
    cw = rng.standard_normal((5, 32))
    gx = rng.standard_normal((32, 15, 32))
    cases = []
    for name, mode in (("pair_product", K.PAIR_PRODUCT), ("pair_difference", K.PAIR_DIFFERENCE)):
        cases.append((f"{name}.forward",
                      lambda m=mode: K.pair_tanh_scores_numba(q, k, w, m),
                      lambda m=mode: K.pair_tanh_scores_numpy(q, k, w, m)))
        cases.append((f"{name}.backward",
                      lambda m=mode: K.pair_tanh_scores_grad_numba(q, k, w, g, m),
                      lambda m=mode: K.pair_tanh_scores_grad_numpy(q, k, w, g, m)))
    cases.append(("depthwise_conv5.forward", lambda: K.depthwise_conv_numba(x, cw),
                  lambda: K.depthwise_conv_numpy(x, cw)))
    cases.append(("depthwise_conv5.backward", lambda: K.depthwise_conv_grad_numba(x, cw, gx),
                  lambda: K.depthwise_conv_grad_numpy(x, cw, gx)))
    return cases


def hypernet_step_time(use_numba, repeats):
    from tsnas import diffcore as dc
    from tsnas.hypernet import HyperNetwork
    from tsnas.nnops import ModelConfig

    cfg = ModelConfig(d_m=32, num_blocks=2, num_heads=4, patch_len=8, patch_stride=4, lookback=64, horizon=16)
    model = HyperNetwork(cfg, seed=0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 1, 64))
    y = rng.standard_normal((32, 1, 16))

    def step():
        loss = dc.mse_loss(model(x), y)
        dc.backward(loss)
        dc.AdamW.zero_grad(model.parameters() + model.alphas())

    saved = K.USE_NUMBA
    K.USE_NUMBA = use_numba
    try:
        return best_of(step, repeats, number=2)
    finally:
        K.USE_NUMBA = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--json", help="also write the timings here")
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fast, slow in kernel_cases(rng):
        a, b = best_of(fast, args.repeats), best_of(slow, args.repeats)
        fo, so = fast(), slow()
        fo, so = (fo, so) if isinstance(fo, tuple) else ((fo,), (so,))
        for x, y in zip(fo, so):
            assert np.allclose(x, y, rtol=1e-10, atol=1e-10), name
        rows.append({"kernel": name, "numba_s": a, "numpy_s": b})
        print(f"{name:28s} {a * 1e3:10.3f} {b * 1e3:10.3f} {b / a:8.2f}")

    a = hypernet_step_time(True, max(3, args.repeats // 4))
    b = hypernet_step_time(False, max(3, args.repeats // 4))
    rows.append({"kernel": "hypernet_train_step", "numba_s": a, "numpy_s": b})
    print(f"{'hypernet_train_step':28s} {a * 1e3:10.3f} {b * 1e3:10.3f} {b / a:8.2f}")

    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

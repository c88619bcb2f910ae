"""Time the numpy and numba kernel backends on tiny-model shaped inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each kernel is called once before timing so numba compilation is excluded.
Outputs of both backends are compared before timing.
"""

import argparse
import time

import numpy as np

from taskweight.kernels import IMPLEMENTATIONS


def _inputs(rng):
    b, c, t, f, k = 8, 8, 100, 64, 3
    xpad = rng.standard_normal((b, c, t + k - 1, f + k - 1))
    cols = rng.standard_normal((b, c * k * k, t * f))
    x = rng.standard_normal((b, c, t, f))
    l, h = 100, 8
    xw = rng.standard_normal((l, b, 3 * h))
    whT = 0.3 * rng.standard_normal((h, 3 * h))
    bh = 0.1 * rng.standard_normal(3 * h)
    return {"im2col": (xpad, k), "col2im": (cols, c, t, f, k), "maxpool": (x, 1, 8), "gru": (xw, whT, bh)}


def _calls(impl, inp, rng):
    x, pt, pf = inp["maxpool"]
    pooled, idx = impl["maxpool_forward"](x, pt, pf)
    gpool = rng.standard_normal(pooled.shape)
    out = impl["gru_forward"](*inp["gru"])
    dout = rng.standard_normal(out[0][1:].shape)
    whT = inp["gru"][1]
    return {
        "im2col": lambda: impl["im2col"](*inp["im2col"]),
        "col2im": lambda: impl["col2im"](*inp["col2im"]),
        "maxpool_forward": lambda: impl["maxpool_forward"](x, pt, pf),
        "maxpool_backward": lambda: impl["maxpool_backward"](gpool, idx, x.shape, pt, pf),
        "gru_forward": lambda: impl["gru_forward"](*inp["gru"]),
        "gru_backward": lambda: impl["gru_backward"](dout, *out, whT),
    }


def _flat(result):
    if isinstance(result, tuple):
        return np.concatenate([np.ravel(r).astype(np.float64) for r in result])
    return np.ravel(result)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    inp = _inputs(np.random.default_rng(0))
    calls = {name: _calls(impl, inp, np.random.default_rng(1)) for name, impl in IMPLEMENTATIONS.items()}
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for kernel in calls["numpy"]:
        ref = _flat(calls["numpy"][kernel]())
        got = _flat(calls["numba"][kernel]())
        diff = float(np.max(np.abs(ref - got)))
        times = {}
        for backend in ("numpy", "numba"):
            fn = calls[backend][kernel]
            t0 = time.perf_counter()
            for _ in range(args.repeat):
                fn()
            times[backend] = 1e3 * (time.perf_counter() - t0) / args.repeat
        print(f"{kernel:<18}{times['numpy']:>10.3f}{times['numba']:>10.3f}"
              f"{times['numpy'] / times['numba']:>8.2f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()

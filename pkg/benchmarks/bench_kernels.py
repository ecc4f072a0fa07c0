"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 64]

Each row reports the best-of-``repeat`` wall time per call for both backends,
the speed-up, and the largest absolute difference between their outputs.
The numba functions are compiled (or loaded from cache) before timing.
"""
import argparse
import time

import numpy as np

from deltanet import _kernels as K


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def cases(batch, rng):
    out = []
    for C, H, O in ((3, 32, 8), (8, 16, 16), (16, 8, 16)):
        x = rng.standard_normal((batch, C, H, H))
        w = rng.standard_normal((O, C, 3, 3)) / 3.0
        b = rng.standard_normal(O)
        g = rng.standard_normal((batch, O, H, H))
        out.append((f"conv2d fwd  {C:>2}x{H}x{H}->{O}", lambda x=x, w=w, b=b: K.conv2d_forward(x, w, b, 1)))
        out.append((f"conv2d bwd  {C:>2}x{H}x{H}->{O}", lambda x=x, w=w, g=g: K.conv2d_backward(x, w, g, 1)))
    for R, D in ((batch, 64), (batch * 25, 64)):
        gates = rng.standard_normal((R, 4 * D))
        c = rng.standard_normal((R, D))
        gc = rng.standard_normal((R, D))
        out.append((f"lstm state fwd  {R}x{D}", lambda gates=gates, c=c: K.lstm_state_forward(gates, c)))
        out.append((f"lstm state bwd  {R}x{D}",
                    lambda gates=gates, c=c, gc=gc: K.lstm_state_backward(gates, c, gc)))
        out.append((f"lstm hidden fwd {R}x{D}", lambda gates=gates, c=c: K.lstm_hidden_forward(gates, c)))
    a = rng.integers(0, 30, 60)
    bb = rng.integers(0, 30, 60)
    out.append(("lcs 60x60", lambda: K.lcs_length(a, bb)))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    saved = K.USE_NUMBA
    print(f"{'kernel':<30}{'numba ms':>10}{'numpy ms':>10}{'speed-up':>10}{'max |diff|':>12}")
    try:
        for name, fn in cases(args.batch, rng):
            K.USE_NUMBA = True
            fn()  # compile / load cache
            r_nb = fn()
            t_nb = best_time(fn, args.repeat)
            K.USE_NUMBA = False
            r_np = fn()
            t_np = best_time(fn, args.repeat)
            print(f"{name:<30}{t_nb * 1e3:>10.3f}{t_np * 1e3:>10.3f}{t_np / t_nb:>9.1f}x"
                  f"{max_diff(r_nb, r_np):>12.1e}")
    finally:
        K.USE_NUMBA = saved


if __name__ == "__main__":
    main()

"""Compiled vs numpy kernel timings, per kernel and for one training episode.

    python benchmarks/bench_kernels.py [--repeats 20] [--json out.json]
"""
import argparse
import json
import time

import numpy as np

from wavecorr import kernels
from wavecorr.data import planted_config, generate_synthetic, to_relatives
from wavecorr.policy import PolicySpec, init_params
from wavecorr.trainer import EpisodeState, TrainConfig, episode_gradient
from wavecorr.tensor import seed_rng

# (label, m, L, c_in, c_out, kernel, dilation, start)
CONV_CASES = [
    ("block0 conv1", 10, 63, 1, 8, 3, 1, 0),
    ("block2 conv2", 10, 63, 16, 16, 3, 4, 0),
    ("final causal", 10, 63, 17, 16, 4, 1, 31),
]
CORR_CASES = [("corr d=16", 10, 63, 16), ("corr d=8 m=50", 50, 63, 8)]


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_rows(impl, repeats, rng):
    rows = {}
    for label, m, L, ci, co, k, r, start in CONV_CASES:
        x = rng.normal(size=(m, L, ci))
        W = rng.normal(size=(co, ci, k))
        b = rng.normal(size=co)
        g = rng.normal(size=(m, L - start, co))
        rows[label + " fwd"] = best_of(lambda: impl.conv_forward(x, W, b, r, start), repeats)
        rows[label + " bwd"] = best_of(lambda: impl.conv_backward(g, x, W, r, start), repeats)
    for label, m, L, d in CORR_CASES:
        x = rng.normal(size=(m, L, d))
        w = rng.normal(size=(m + 1, d))
        g = rng.normal(size=(m, L))
        rows[label + " fwd"] = best_of(lambda: impl.corr_forward(x, w, 0.1), repeats)
        rows[label + " bwd"] = best_of(lambda: impl.corr_backward(g, x, w), repeats)
    return rows


def episode_time(repeats):
    window = to_relatives(generate_synthetic(planted_config(m=10, days=400, seed=0))).with_splits()
    params = init_params(PolicySpec(m=10), 0)
    cfg = TrainConfig(T=32)
    ep = EpisodeState(0, np.full(10, 0.1))
    return best_of(lambda: episode_gradient(params, window, ep, cfg, rng=seed_rng(0)), repeats)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--json", help="write timings here")
    args = ap.parse_args()
    available = dict(kernels.backends())
    results = {}
    for name, impl in available.items():
        rows = kernel_rows(impl, args.repeats, np.random.default_rng(0))
        prev = kernels.set_backend(name)
        rows["episode gradient (m=10, T=32)"] = episode_time(max(3, args.repeats // 4))
        kernels.set_backend(prev)
        results[name] = rows
    names = list(results)
    labels = list(results[names[0]])
    head = f"{'case':34s}" + "".join(f"{n + ' ms':>14s}" for n in names)
    if "cython" in results:
        head += f"{'speedup':>10s}"
    print(head)
    for lab in labels:
        line = f"{lab:34s}" + "".join(f"{results[n][lab] * 1e3:14.4f}" for n in names)
        if "cython" in results:
            line += f"{results['python'][lab] / results['cython'][lab]:10.2f}"
        print(line)
    if "cython" not in results:
        print("compiled extension not built; only the numpy backend was timed")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()

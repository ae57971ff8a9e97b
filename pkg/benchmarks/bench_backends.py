"""Compare the compiled kernels against the numpy fallback.

Micro-benchmarks call both kernel modules directly in one process and
check bit-identical outputs along the way.  The end-to-end row retrains
the same small model in a subprocess per backend, because selection
happens once at import time.

    python benchmarks/bench_backends.py
    python benchmarks/bench_backends.py --loops 200 --iterations 500
"""
import argparse
import hashlib
import os
import subprocess
import sys
import time

import numpy as np

from miltag.backend import py_kernels

try:
    from miltag.backend import _ckernels
except ImportError:
    _ckernels = None

# one training mini-batch of 64 ten-instance bags through a width-64 trunk
ROWS, COLS, NSEG = 640, 64, 64


def make_cases(rng):
    x = rng.standard_normal((ROWS, COLS))
    g = rng.standard_normal((ROWS, COLS))
    sig = 1.0 / (1.0 + np.exp(-x))
    ex = np.exp(np.clip(x, -20.0, 20.0))
    offsets = np.linspace(0, ROWS, NSEG + 1).astype(np.int64)
    seg = rng.standard_normal((NSEG, COLS))
    _, arg = py_kernels.segment_max(x, offsets)
    flat = ROWS * COLS
    # persistent optimizer state: with a fixed gradient the moments settle,
    # so repeated in-place steps stay finite and the loop times only the kernel
    p, m, v = np.ones(flat), np.zeros(flat), np.zeros(flat)
    ga = rng.standard_normal(flat)
    return [
        ("relu_fwd", lambda k: k.relu_fwd(x)),
        ("relu_bwd", lambda k: k.relu_bwd(x, g)),
        ("sigmoid_fwd", lambda k: k.sigmoid_fwd(x)),
        ("sigmoid_bwd", lambda k: k.sigmoid_bwd(sig, g)),
        ("exp_clamped_fwd", lambda k: k.exp_clamped_fwd(x, -20.0, 20.0)),
        ("exp_clamped_bwd", lambda k: k.exp_clamped_bwd(x, ex, g, -20.0, 20.0)),
        ("segment_sum", lambda k: k.segment_sum(x, offsets)),
        ("segment_expand", lambda k: k.segment_expand(seg, offsets, ROWS)),
        ("segment_max", lambda k: k.segment_max(x, offsets)),
        ("segment_min", lambda k: k.segment_min(x, offsets)),
        ("scatter_rows_add", lambda k: k.scatter_rows_add(seg, arg, ROWS)),
        ("adam_update", lambda k: k.adam_update(p, ga, m, v,
                                                1e-3, 0.9, 0.999, 1e-8, 3)),
    ]


def best_of(fn, loops, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        best = min(best, (time.perf_counter() - t0) / loops)
    return best


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return a is None and b is None or np.array_equal(a, b, equal_nan=True)


def bench_kernels(loops):
    rng = np.random.default_rng(0)
    cases = make_cases(rng)
    print(f"{'kernel':<18} {'python':>12} {'cython':>12} {'speedup':>9}   identical")
    for name, call in cases:
        t_py = best_of(lambda: call(py_kernels), loops)
        if _ckernels is None:
            print(f"{name:<18} {t_py * 1e6:>10.1f}us {'-':>12} {'-':>9}")
            continue
        t_cy = best_of(lambda: call(_ckernels), loops)
        # adam draws fresh random state per call, so compare the rest only
        bitwise = ("n/a (stateful)" if name == "adam_update"
                   else ("yes" if same(call(py_kernels), call(_ckernels)) else "NO"))
        print(f"{name:<18} {t_py * 1e6:>10.1f}us {t_cy * 1e6:>10.1f}us "
              f"{t_py / t_cy:>8.1f}x   {bitwise}")


def train_child(iterations):
    from miltag.backend import NAME
    from miltag.data import SynthSpec, generate_synthetic
    from miltag.models import Model, ModelSpec
    from miltag.training import TrainConfig, train

    ds = generate_synthetic(SynthSpec(classes=10, dim=32, bags_per_class=40,
                                      instances_per_bag=10, positives_per_bag=1,
                                      seed=0))
    spec = ModelSpec(input_dim=32, classes=10, head="feature_att",
                     gate="sigmoid", trunk_depth=1, trunk_width=64,
                     att_dim=32, dropout=0.5)
    model = Model.build(spec, seed=0)
    train(model, ds, TrainConfig(iterations=20, batch_size=64,
                                 checkpoint_interval=20, ensemble_size=1,
                                 seed=0))  # warm-up
    t0 = time.perf_counter()
    train(model, ds, TrainConfig(iterations=iterations, batch_size=64,
                                 checkpoint_interval=iterations,
                                 ensemble_size=1, seed=0))
    dt = time.perf_counter() - t0
    digest = hashlib.sha256()
    for name in sorted(model.params):
        digest.update(model.params[name].tobytes())
    print(f"{NAME} {1000.0 * dt / iterations:.3f} {digest.hexdigest()[:16]}")


def bench_end_to_end(iterations):
    rows = {}
    for backend in ("python", "cython"):
        if backend == "cython" and _ckernels is None:
            continue
        env = dict(os.environ, MILTAG_BACKEND=backend)
        out = subprocess.run(
            [sys.executable, __file__, "--train-child",
             "--iterations", str(iterations)],
            env=env, capture_output=True, text=True, check=True)
        _, ms, digest = out.stdout.split()
        rows[backend] = (float(ms), digest)
    print(f"\nend-to-end feature_att training, {iterations} iterations:")
    for backend, (ms, digest) in rows.items():
        print(f"  {backend:<8} {ms:8.3f} ms/iter   params sha256 {digest}")
    if len(rows) == 2:
        speedup = rows["python"][0] / rows["cython"][0]
        agree = rows["python"][1] == rows["cython"][1]
        print(f"  speedup {speedup:.1f}x, trained parameters "
              f"{'bit-identical' if agree else 'DIFFER'}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--loops", type=int, default=300,
                    help="micro-benchmark inner loop count")
    ap.add_argument("--iterations", type=int, default=300,
                    help="end-to-end training iterations per backend")
    ap.add_argument("--train-child", action="store_true",
                    help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.train_child:
        train_child(args.iterations)
        return
    if _ckernels is None:
        print("compiled extension not built; timing the numpy fallback only\n")
    bench_kernels(args.loops)
    bench_end_to_end(args.iterations)


if __name__ == "__main__":
    main()

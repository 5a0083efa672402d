"""Time the compiled kernels against their pure-Python twins.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from dynspot._kernels import _pykernels

try:
    from dynspot._kernels import _ckernels
except ImportError:
    _ckernels = None


def hungarian_cases(rng):
    for n in (8, 16, 32, 64):
        yield f"hungarian n={n}", "hungarian", (rng.uniform(-1, 10, (n, n)),)


def matching_cases(rng):
    for n_det, n_gt in ((100, 20), (1000, 100), (5000, 400)):
        frames = rng.integers(1, 20 * n_gt, n_det).astype(np.int64)
        gt = np.sort(rng.choice(np.arange(1, 20 * n_gt), n_gt, replace=False)).astype(np.int64)
        yield f"match_detections {n_det}x{n_gt}", "match_detections", (frames, gt, 2)


def best_of(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'case':<30}{'python':>12}{'cython':>12}{'speedup':>10}")
    for label, name, inputs in [*hungarian_cases(rng), *matching_cases(rng)]:
        py = best_of(getattr(_pykernels, name), inputs, args.repeat)
        if _ckernels is None:
            print(f"{label:<30}{py * 1e3:>10.3f}ms{'n/a':>12}{'':>10}")
            continue
        cy = best_of(getattr(_ckernels, name), inputs, args.repeat)
        print(f"{label:<30}{py * 1e3:>10.3f}ms{cy * 1e3:>10.3f}ms{py / cy:>9.1f}x")


if __name__ == "__main__":
    main()

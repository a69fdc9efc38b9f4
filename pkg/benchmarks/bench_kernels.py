"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat N]

Each row reports the best-of-N wall time per call for both backends and
checks that they return identical arrays.
"""

import argparse
import timeit

import numpy as np

from rainscale.kernels import available_backends, get_backend
from rainscale.tracker import reach_offsets


def cases(rng):
    x = rng.standard_normal((8, 16, 64, 128))
    yield "im2col 3x3 s1", "im2col", (x, 3, 1, 1)
    yield "im2col 4x4 s2", "im2col", (x, 4, 2, 1)
    cols = rng.standard_normal((8, 16, 4, 4, 32, 64))
    yield "col2im 4x4 s2", "col2im", (cols, (8, 16, 64, 128), 4, 2, 1)
    mask = rng.random((256, 512)) > 0.9
    for r in (0, 2):
        yield f"label_reach r={r} 256x512", "label_reach", (mask, reach_offsets(r))


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5, help="timings per case; the best is reported")
    parser.add_argument("--seed", type=int, default=0, help="seed for the random inputs")
    args = parser.parse_args(argv)
    names = available_backends()
    if "compiled" not in names:
        print("compiled kernels are not built; only the numpy fallback is available")
    print(f"{'case':28s}" + "".join(f"{n:>12s}" for n in names) + ("   speedup  identical" if len(names) > 1 else ""))
    for label, fn, inputs in cases(np.random.default_rng(args.seed)):
        times, outs = [], []
        for name in names:
            f = getattr(get_backend(name), fn)
            outs.append(f(*inputs))
            times.append(min(timeit.repeat(lambda: f(*inputs), number=1, repeat=args.repeat)))
        row = f"{label:28s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(names) > 1:
            row += f"   {times[0] / times[1]:7.2f}x  {same(outs[0], outs[1])!s:>9s}"
        print(row)


if __name__ == "__main__":
    main()

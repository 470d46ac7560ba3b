"""Time the hot kernels under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best of ``--repeat`` timings per backend and the max
absolute difference between the two outputs. The numba kernels are warmed
up (compiled) before timing.
"""
import argparse
import timeit

import numpy as np

from scdcf import _jit, kernels
from scdcf.actions import GroupElement, apply_D
from scdcf.harness import smooth_blobs


def cases(rng):
    x = rng.standard_normal((16, 4, 40, 40))
    L = 7
    cols = kernels.im2col(x, L)
    img = rng.standard_normal((8, 56, 56))
    r, c = np.meshgrid(np.linspace(-2, 57, 56), np.linspace(-2, 57, 56), indexing="ij")
    blob = smooth_blobs(0, (56, 56))
    return {
        "corr2d_valid 4x40x40 * 4x7x7": lambda: kernels.corr2d_valid(x[0], x[1, :, :7, :7]),
        "im2col 16x4x40x40 L=7": lambda: kernels.im2col(x, L),
        "col2im 16x4x40x40 L=7": lambda: kernels.col2im(cols, 40, 40),
        "bilinear 8x56x56": lambda: kernels.bilinear_sample(img, r, c),
        "apply_D 56x56 beta=0.5": lambda: apply_D(blob, GroupElement(0.5, (1.0, -2.0))),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _jit.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    work = cases(np.random.default_rng(0))
    previous = _jit.backend()
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    try:
        for name, fn in work.items():
            best, out = {}, {}
            for be in ("numba", "numpy"):
                _jit.set_backend(be)
                out[be] = fn()  # also compiles the numba path
                best[be] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            diff = float(np.abs(np.asarray(out["numba"]) - np.asarray(out["numpy"])).max())
            print(f"{name:32s} {1e3 * best['numba']:10.3f} {1e3 * best['numpy']:10.3f} "
                  f"{best['numpy'] / best['numba']:8.2f} {diff:10.2e}")
    finally:
        _jit.set_backend(previous)


if __name__ == "__main__":
    main()

"""Convert the 5,000-digit MNIST sample shipped in the mlxtend wheel to gzipped IDX files.

The wheel is a plain zip archive, so it is read directly without installing
mlxtend. Fetch it with::

    pip download mlxtend --no-deps -d /tmp/mlx
    python3 scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl data/
"""
import argparse
import csv
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from scdcf.actions import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_wheel_csv(wheel):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    rows = np.array(list(csv.reader(io.StringIO(raw.decode("ascii")))), dtype=np.int64)
    # 784 row-major pixels followed by the label
    return rows[:, :-1].reshape(-1, 28, 28), rows[:, -1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--seed", type=int, default=0, help="permutation seed")
    args = ap.parse_args(argv)
    images, labels = read_wheel_csv(args.wheel)
    perm = np.random.default_rng(args.seed).permutation(len(labels))
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "mnist5k-images-idx3-ubyte.gz", images[perm])
    write_idx(args.out / "mnist5k-labels-idx1-ubyte.gz", labels[perm])
    print(f"wrote {len(labels)} digits to {args.out}")


if __name__ == "__main__":
    main()

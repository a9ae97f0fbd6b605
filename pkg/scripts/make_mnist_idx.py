"""Write MNIST IDX files from the 5,000-image MNIST sample bundled with mlxtend.

The sample is shuffled with a fixed seed and split into 4,000 training and
1,000 held-out images, written under the standard IDX filenames so that
``matrixorder train --task mnist --data-dir DIR`` can read them. If the
full MNIST IDX files are available, point ``--data-dir`` at them instead.

    python scripts/make_mnist_idx.py data/mnist
"""
import argparse
import gzip
import os
import sys
from pathlib import Path

import numpy as np

from matrixorder.data2matrix import write_idx_images, write_idx_labels
from matrixorder.trainer import MNIST_FILES


def mlxtend_sample_path() -> Path:
    import mlxtend

    return Path(os.path.dirname(mlxtend.__file__)) / "data" / "data" / "mnist_5k.csv.gz"


def build(out_dir, n_train: int = 4000, seed: int = 0) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.open(mlxtend_sample_path(), "rt") as fh:
        raw = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    pixels, labels = raw[:, :784].reshape(-1, 28, 28), raw[:, 784]
    order = np.random.default_rng(seed).permutation(labels.size)
    pixels, labels = pixels[order], labels[order]
    write_idx_images(out / MNIST_FILES["train_images"], pixels[:n_train])
    write_idx_labels(out / MNIST_FILES["train_labels"], labels[:n_train])
    write_idx_images(out / MNIST_FILES["test_images"], pixels[n_train:])
    write_idx_labels(out / MNIST_FILES["test_labels"], labels[n_train:])
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", nargs="?", default="data/mnist")
    ap.add_argument("--n-train", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    out = build(args.out_dir, args.n_train, args.seed)
    print(f"wrote IDX files to {out}", file=sys.stderr)


if __name__ == "__main__":
    main()

"""Pack the digits bundled with the npm ``mnist`` package into IDX files.

The package (``npm pack mnist``) ships ~10k MNIST digits as JSON float
arrays in ``package/src/digits/<d>.json``.  This writes a shuffled
train/test split in the standard IDX layout under ``<out>/mnist/``.

    python scripts/mnist_from_npm.py /tmp/npm/package data --test 2000
"""

import argparse
import json
from pathlib import Path

import numpy as np

from ccaug.data import write_idx


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir")
    ap.add_argument("out_root")
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for d in range(10):
        flat = np.array(json.loads((Path(args.package_dir) / "src" / "digits" / f"{d}.json").read_text())["data"])
        imgs = np.rint(flat.reshape(-1, 28, 28) * 255).clip(0, 255).astype(np.uint8)
        images.append(imgs)
        labels.append(np.full(len(imgs), d, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    out = Path(args.out_root) / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    n_train = len(labels) - args.test
    write_idx(out / "train-images-idx3-ubyte.gz", out / "train-labels-idx1-ubyte.gz", images[:n_train], labels[:n_train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", out / "t10k-labels-idx1-ubyte.gz", images[n_train:], labels[n_train:])
    print(f"wrote {n_train} train / {args.test} test digits to {out}")


if __name__ == "__main__":
    main()

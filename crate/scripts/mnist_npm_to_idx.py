"""Convert the 10,000 MNIST digits bundled in the npm `mnist` package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_npm_to_idx.py package/src/digits data/mnist10k

The package stores each digit class as a flat list of pixel intensities divided
by 255 and rounded to three decimals; this script restores the original bytes and
writes a class-stratified 80/20 train/test split (fixed seed) in the standard
IDX layout.
"""

import json
import struct
import sys
from pathlib import Path

import numpy as np

SIDE = 28
TEST_FRACTION = 0.2
SEED = 20190101


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst):
    rng = np.random.default_rng(SEED)
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        raw = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        pixels = np.rint(np.asarray(raw, dtype=np.float64) * 255.0).clip(0, 255)
        pixels = pixels.reshape(-1, SIDE * SIDE)
        order = rng.permutation(len(pixels))
        n_test = int(round(len(pixels) * TEST_FRACTION))
        test_x.append(pixels[order[:n_test]])
        test_y.append(np.full(n_test, digit))
        train_x.append(pixels[order[n_test:]])
        train_y.append(np.full(len(pixels) - n_test, digit))

    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for split, xs, ys in (("train", train_x, train_y), ("test", test_x, test_y)):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        shuffle = rng.permutation(len(y))
        write_idx_images(out / f"{split}-images-idx3-ubyte", x[shuffle])
        write_idx_labels(out / f"{split}-labels-idx1-ubyte", y[shuffle])
        print(split, len(y))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

#!/usr/bin/env python3
"""Build an IDX-format MNIST subset from the digits bundled in the npm `mnist` package.

The npm package (https://www.npmjs.com/package/mnist) ships 10,000 MNIST digits as
28x28 grayscale values in [0, 1] rounded to three decimals, which is fine enough to
recover the original bytes exactly via round(v * 255).

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist-subset

Every fifth sample of each class goes to the test split (8000 train / 2000 test);
both splits are then shuffled with a fixed seed so prefixes are class-balanced.
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload.tobytes())


def main(digits_dir, out_dir):
    train_x, train_y, test_x, test_y = [], [], [], []
    for label in range(10):
        with open(os.path.join(digits_dir, f"{label}.json")) as f:
            values = np.asarray(json.load(f)["data"], dtype=np.float64).reshape(-1, 784)
        pixels = np.rint(values * 255.0).astype(np.uint8)
        for i, row in enumerate(pixels):
            if i % 5 == 4:
                test_x.append(row)
                test_y.append(label)
            else:
                train_x.append(row)
                train_y.append(label)

    rng = np.random.RandomState(0)
    os.makedirs(out_dir, exist_ok=True)
    for prefix, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        order = rng.permutation(len(xs))
        x = np.stack(xs)[order]
        y = np.asarray(ys, dtype=np.uint8)[order]
        write_idx(os.path.join(out_dir, f"{prefix}-images-idx3-ubyte.gz"), 0x803, (len(x), 28, 28), x)
        write_idx(os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte.gz"), 0x801, (len(y),), y)
        print(f"{prefix}: {len(x)} images, label histogram {np.bincount(y, minlength=10).tolist()}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])

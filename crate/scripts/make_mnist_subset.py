#!/usr/bin/env python3
"""Cut an MNIST subset (first N train / first M test samples) into IDX files.

Usage: make_mnist_subset.py SRC_DIR OUT_DIR [N_TRAIN] [N_TEST]

SRC_DIR must hold the four standard MNIST IDX files, e.g. from
`npm pack mnist-data && tar xzf mnist-data-*.tgz` (package/data/).
"""
import os
import struct
import sys


def cut(src, dst, count):
    with open(src, "rb") as f:
        magic = struct.unpack(">I", f.read(4))[0]
        ndim = magic & 0xFF
        dims = list(struct.unpack(">" + "I" * ndim, f.read(4 * ndim)))
        if dims[0] < count:
            raise SystemExit(f"{src}: only {dims[0]} items, need {count}")
        item = 1
        for d in dims[1:]:
            item *= d
        payload = f.read(item * count)
    dims[0] = count
    with open(dst, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(">" + "I" * ndim, *dims))
        f.write(payload)


def main():
    if len(sys.argv) < 3:
        raise SystemExit(__doc__)
    src, out = sys.argv[1], sys.argv[2]
    n_train = int(sys.argv[3]) if len(sys.argv) > 3 else 10000
    n_test = int(sys.argv[4]) if len(sys.argv) > 4 else 2000
    os.makedirs(out, exist_ok=True)
    cut(os.path.join(src, "train-images-idx3-ubyte"), os.path.join(out, "train-images-idx3-ubyte"), n_train)
    cut(os.path.join(src, "train-labels-idx1-ubyte"), os.path.join(out, "train-labels-idx1-ubyte"), n_train)
    cut(os.path.join(src, "t10k-images-idx3-ubyte"), os.path.join(out, "test-images-idx3-ubyte"), n_test)
    cut(os.path.join(src, "t10k-labels-idx1-ubyte"), os.path.join(out, "test-labels-idx1-ubyte"), n_test)


if __name__ == "__main__":
    main()

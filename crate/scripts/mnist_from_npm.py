#!/usr/bin/env python3
"""Build gzipped IDX files from the 10,000 MNIST digits shipped in the npm
`mnist` package (src/digits/<d>.json, 784 floats per image in [0,1]).

Usage: python3 scripts/mnist_from_npm.py <path-to-unpacked-npm-package> <out-dir>

Per class, the first 80% of images go to the training split and the rest to
the test split. Output files use the standard MNIST names with a .gz suffix.
"""
import gzip
import json
import os
import struct
import sys


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    pkg, out = sys.argv[1], sys.argv[2]
    train, test = [], []
    for digit in range(10):
        with open(os.path.join(pkg, "src", "digits", f"{digit}.json")) as f:
            raw = json.load(f)["data"]
        n = len(raw) // 784
        imgs = [
            [max(0, min(255, round(v * 255))) for v in raw[i * 784:(i + 1) * 784]]
            for i in range(n)
        ]
        cut = (n * 4) // 5
        train += [(img, digit) for img in imgs[:cut]]
        test += [(img, digit) for img in imgs[cut:]]
    os.makedirs(out, exist_ok=True)
    for name, rows in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), [r[0] for r in rows])
        write_idx_labels(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), [r[1] for r in rows])
        print(name, len(rows))


if __name__ == "__main__":
    main()

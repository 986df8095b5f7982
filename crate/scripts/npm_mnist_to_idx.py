#!/usr/bin/env python3
"""Convert the `mnist` / `fashion-mnist` npm packages into gzipped IDX files.

The npm packages ship per-class JSON arrays. This script rebuilds the standard
IDX containers (train/t10k images and labels) with a deterministic shuffled
split, so the Rust loaders can read them like the official distribution.

    npm pack mnist fashion-mnist
    tar xzf mnist-1.1.0.tgz -C mnist && tar xzf fashion-mnist-1.1.0.tgz -C fashion
    python3 scripts/npm_mnist_to_idx.py mnist/package/src/digits data/mnist --test 2000
    python3 scripts/npm_mnist_to_idx.py fashion/package/src/clothes data/fashion-mnist \
        --test 5000 --train 20000
"""
import argparse
import gzip
import json
import os
import random
import struct


def load_class(path):
    data = json.load(open(path))["data"]
    if data and isinstance(data[0], list):
        # Some packaged records are empty; keep only full 28x28 images.
        return [bytes(int(v) for v in img) for img in data if len(img) == 784]
    # flat list of floats in [0,1], 784 per image
    out = []
    for i in range(0, len(data) - 783, 784):
        out.append(bytes(min(255, max(0, round(v * 255))) for v in data[i:i + 784]))
    return out


def write_idx(path, images, labels):
    with gzip.GzipFile(path + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(path + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("src")
    ap.add_argument("dst")
    ap.add_argument("--test", type=int, required=True)
    ap.add_argument("--train", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    items = []
    for c in range(10):
        for img in load_class(os.path.join(args.src, f"{c}.json")):
            items.append((img, c))
    random.Random(args.seed).shuffle(items)
    test, train = items[:args.test], items[args.test:]
    if args.train is not None:
        train = train[:args.train]
    os.makedirs(args.dst, exist_ok=True)
    write_idx(os.path.join(args.dst, "train"), [i for i, _ in train], [l for _, l in train])
    write_idx(os.path.join(args.dst, "t10k"), [i for i, _ in test], [l for _, l in test])
    print(f"{args.dst}: {len(train)} train, {len(test)} test")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Convert the 10,000-digit MNIST subset shipped in the `mnist` npm package
(src/digits/<d>.json, pixels stored as value/255) into gzipped IDX files.

Usage: mnist_subset_to_idx.py <package/src/digits> <out dir> [train fraction]

Each digit class is split in file order: the first `train fraction` of its
samples go to the training set, the rest to the test set.
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    frac = float(sys.argv[3]) if len(sys.argv) > 3 else 0.8
    out.mkdir(parents=True, exist_ok=True)
    split = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        n = len(data) // 784
        n_train = int(n * frac)
        for i in range(n):
            px = bytes(min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784])
            key = "train" if i < n_train else "t10k"
            split[key][0].append(px)
            split[key][1].append(digit)
    for key, (imgs, labels) in split.items():
        write_idx(out / f"{key}-images-idx3-ubyte.gz", 0x803, [len(imgs), 28, 28], b"".join(imgs))
        write_idx(out / f"{key}-labels-idx1-ubyte.gz", 0x801, [len(labels)], bytes(labels))
        print(key, len(imgs))


if __name__ == "__main__":
    main()

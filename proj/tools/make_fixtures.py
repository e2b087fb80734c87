#!/usr/bin/env python3
"""Regenerate the small datasets under fixtures/.

mnist_small/  first 120 training and 60 test images of the real MNIST files
              (uncompressed train files, gzip-compressed test files so both
              code paths are exercised)
cifar_small/  synthetic CIFAR-10 binary batches, 12 records each, drawn from
              a fixed seed
"""
import argparse
import gzip
import random
import struct
from pathlib import Path


def idx_slice(path, count):
    data = Path(path).read_bytes()
    ndim = data[3]
    dims = list(struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim]))
    per = 1
    for d in dims[1:]:
        per *= d
    dims[0] = count
    header = data[:4] + struct.pack(">" + "I" * ndim, *dims)
    start = 4 + 4 * ndim
    return header + data[start:start + count * per]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mnist", default="/root/data/mnist")
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "fixtures"))
    args = ap.parse_args()
    out = Path(args.out)

    m = out / "mnist_small"
    m.mkdir(parents=True, exist_ok=True)
    for name, count, zipped in [("train-images-idx3-ubyte", 120, False), ("train-labels-idx1-ubyte", 120, False),
                                ("t10k-images-idx3-ubyte", 60, True), ("t10k-labels-idx1-ubyte", 60, True)]:
        blob = idx_slice(Path(args.mnist) / name, count)
        if zipped:
            # mtime=0 keeps the archive byte-stable across regenerations.
            with open(m / (name + ".gz"), "wb") as f:
                f.write(gzip.compress(blob, mtime=0))
        else:
            (m / name).write_bytes(blob)

    c = out / "cifar_small"
    c.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20240601)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        rec = bytearray()
        for _ in range(12):
            rec.append(rng.randrange(10))
            rec.extend(rng.randrange(256) for _ in range(3072))
        (c / name).write_bytes(bytes(rec))


if __name__ == "__main__":
    main()

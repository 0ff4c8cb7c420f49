#!/usr/bin/env python3
"""Build gzipped IDX files from the 10k-digit subset shipped in the `mnist` npm package.

Usage: scripts/mnist_from_npm.py <unpacked npm package dir> <out dir>

Each class is split deterministically: every fifth sample goes to the test
split, the rest to train. Pixels are stored as round(v * 255).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main():
    src = Path(sys.argv[1]) / "src" / "digits"
    out = Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": [], "t10k": []}
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(flat) // 784
        for i in range(n):
            pixels = [min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784]]
            splits["t10k" if i % 5 == 4 else "train"].append((digit, pixels))
    rng = random.Random(0)
    for name, samples in splits.items():
        rng.shuffle(samples)
        images = bytearray()
        for _, px in samples:
            images.extend(px)
        labels = [d for d, _ in samples]
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [len(samples), 28, 28], images)
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(samples)], labels)
        print(name, len(samples))


if __name__ == "__main__":
    main()

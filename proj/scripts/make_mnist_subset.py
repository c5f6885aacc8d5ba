#!/usr/bin/env python3
"""Convert the 10k-digit MNIST sample shipped in the npm `mnist` package into
gzipped IDX files (8000 train / 2000 test, fixed shuffle).

usage: make_mnist_subset.py <path/to/package/src/digits> <out-dir>
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
        f.write(header + payload)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(0, len(flat), 784):
            pix = bytes(min(255, max(0, round(v * 255))) for v in flat[i:i + 784])
            samples.append((pix, digit))
    random.Random(20200810).shuffle(samples)
    splits = {"train": samples[:8000], "t10k": samples[8000:10000]}
    for name, rows in splits.items():
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x00000803, [len(rows), 28, 28],
                  b"".join(p for p, _ in rows))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x00000801, [len(rows)],
                  bytes(l for _, l in rows))
    print(f"wrote {len(samples)} samples to {out}")


if __name__ == "__main__":
    main()

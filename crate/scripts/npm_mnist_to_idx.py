"""Convert the digit JSON files shipped in the npm `mnist` package into IDX files.

Usage: python3 scripts/npm_mnist_to_idx.py <package/src/digits> <out_dir> [n_test]

The package carries 10,000 MNIST digits as normalised floats. Pixels are mapped
back to bytes with round(v * 255), shuffled with a fixed seed, and split into a
train and a test part written as gzip-compressed IDX files under the standard
names.
"""

import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src = Path(sys.argv[1])
    out = Path(sys.argv[2])
    n_test = int(sys.argv[3]) if len(sys.argv) > 3 else 2000
    out.mkdir(parents=True, exist_ok=True)

    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for k in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[k * 784:(k + 1) * 784]]
            samples.append((px, digit))

    random.Random(20220708).shuffle(samples)
    test, train = samples[:n_test], samples[n_test:]
    write_images(out / "train-images-idx3-ubyte.gz", [s[0] for s in train])
    write_labels(out / "train-labels-idx1-ubyte.gz", [s[1] for s in train])
    write_images(out / "t10k-images-idx3-ubyte.gz", [s[0] for s in test])
    write_labels(out / "t10k-labels-idx1-ubyte.gz", [s[1] for s in test])
    print(f"train={len(train)} test={len(test)} -> {out}")


if __name__ == "__main__":
    main()

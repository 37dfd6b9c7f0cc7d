#!/usr/bin/env python3
"""Build the bundled MNIST slice under data/mnist/ as gzipped IDX files.

The slice comes from the `mnist` npm package, which carries 10,000 MNIST
digits as normalized JSON arrays. Pixels are mapped back to bytes, shuffled
with a fixed seed, and split into 8,000 training and 2,000 test samples.

If the original IDX files are available, point `--mnist-dir` or
EQPROP_MNIST_DIR at them instead; this script is only needed when they are not.

Usage: python3 scripts/fetch_mnist.py [--out data/mnist] [--package mnist-1.1.0.tgz]
"""
import argparse
import gzip
import json
import os
import random
import struct
import subprocess
import tarfile
import tempfile

N_TRAIN = 8000
SEED = 20191210


def fetch_package(workdir):
    out = subprocess.run(
        ["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True, capture_output=True, text=True
    )
    return os.path.join(workdir, out.stdout.strip().splitlines()[-1])


def load_digits(tgz):
    samples = []
    with tarfile.open(tgz) as tar:
        for digit in range(10):
            member = tar.getmember(f"package/src/digits/{digit}.json")
            data = json.load(tar.extractfile(member))["data"]
            assert len(data) % 784 == 0
            for i in range(len(data) // 784):
                px = data[i * 784 : (i + 1) * 784]
                raw = bytes(int(round(v * 255)) for v in px)
                # the package stores byte/255 rounded to 3 decimals
                assert all(abs(b / 255 - v) < 6e-4 for b, v in zip(raw, px))
                samples.append((raw, digit))
    return samples


def write_idx(path_images, path_labels, samples):
    with gzip.GzipFile(path_images, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
        for raw, _ in samples:
            f.write(raw)
    with gzip.GzipFile(path_labels, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data", "mnist"))
    ap.add_argument("--package", help="path to an already downloaded mnist-1.1.0.tgz")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tgz = args.package or fetch_package(tmp)
        samples = load_digits(tgz)

    random.Random(SEED).shuffle(samples)
    os.makedirs(args.out, exist_ok=True)
    train, test = samples[:N_TRAIN], samples[N_TRAIN:]
    write_idx(
        os.path.join(args.out, "train-images-idx3-ubyte.gz"),
        os.path.join(args.out, "train-labels-idx1-ubyte.gz"),
        train,
    )
    write_idx(
        os.path.join(args.out, "t10k-images-idx3-ubyte.gz"),
        os.path.join(args.out, "t10k-labels-idx1-ubyte.gz"),
        test,
    )
    print(f"wrote {len(train)} train / {len(test)} test samples to {args.out}")


if __name__ == "__main__":
    main()

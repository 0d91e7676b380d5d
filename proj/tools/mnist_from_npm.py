#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into gzipped IDX files.

Usage: mnist_from_npm.py PACKAGE_DIR OUT_DIR [--train N]

The npm package ships 10,000 MNIST digits as per-class JSON arrays. Each class
is split 80/20 into train/test (stratified), then digits are interleaved class
by class in a fixed order.
"""
import argparse
import gzip
import json
import pathlib
import struct


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(int(round(v * 255.0)) for v in img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train-fraction", type=float, default=0.8)
    args = ap.parse_args()

    per_class = []
    for d in range(10):
        raw = json.loads((pathlib.Path(args.package_dir) / "src" / "digits" / f"{d}.json").read_text())["data"]
        per_class.append([raw[i:i + 784] for i in range(0, len(raw), 784)])

    def interleave(groups):
        images, labels = [], []
        for i in range(max(len(g) for g in groups)):
            for d, g in enumerate(groups):
                if i < len(g):
                    images.append(g[i])
                    labels.append(d)
        return images, labels

    cut = [round(len(c) * args.train_fraction) for c in per_class]
    train = interleave([c[:k] for c, k in zip(per_class, cut)])
    test = interleave([c[k:] for c, k in zip(per_class, cut)])

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte.gz", train[0])
    write_idx_labels(out / "train-labels-idx1-ubyte.gz", train[1])
    write_idx_images(out / "t10k-images-idx3-ubyte.gz", test[0])
    write_idx_labels(out / "t10k-labels-idx1-ubyte.gz", test[1])
    print(f"wrote {len(train[0])} train / {len(test[0])} test digits to {out}")


if __name__ == "__main__":
    main()

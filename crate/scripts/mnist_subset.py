"""Build the bundled MNIST subset (IDX format) from the `mnist` npm package.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset.py package/src/digits data/mnist-desk

The npm package ships 10,000 MNIST digits as JSON (pixels scaled to [0, 1],
rounded to three decimals). Pixels are mapped back to bytes with
round(v * 255), shuffled with a fixed seed and split 3000 train / 1000 test.
"""
import json
import random
import struct
import sys
from pathlib import Path

N_TRAIN = 3000
N_TEST = 1000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    samples = []
    for digit in range(10):
        data = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        for i in range(0, len(data), 784):
            pixels = [min(255, max(0, round(v * 255))) for v in data[i : i + 784]]
            samples.append((pixels, digit))
    random.Random(20240917).shuffle(samples)
    train = samples[:N_TRAIN]
    test = samples[N_TRAIN : N_TRAIN + N_TEST]
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    write_images(out / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(out / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(out / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(out / "t10k-labels-idx1-ubyte", [s[1] for s in test])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

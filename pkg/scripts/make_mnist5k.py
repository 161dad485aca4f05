"""Convert the 5,000-image MNIST subset shipped in the mlxtend wheel to gzipped IDX.

Usage:
    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/make_mnist5k.py /tmp/mlx/mlxtend-*.whl src/smartnet/datasets/mnist5k

The CSV rows are 784 pixel bytes followed by the label and are sorted by
class; a fixed permutation splits them into 4,000 train / 1,000 test images.
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from smartnet.data import write_idx


def main(wheel: str, out_dir: str) -> None:
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels = table[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, 784].astype(np.uint8)
    order = np.random.default_rng(20240101).permutation(len(labels))
    train, test = order[:4000], order[4000:]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", pixels[train])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", pixels[test])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[test])


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

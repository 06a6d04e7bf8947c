"""Write the 5000-image MNIST subset bundled with mlxtend as IDX files.

Usage: python scripts/export_mnist5k_idx.py OUT_DIR
"""

import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from virtualfl.data import write_idx


def export(out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x, y = mnist_data()
    images = out / "mnist5k-images-idx3-ubyte"
    labels = out / "mnist5k-labels-idx1-ubyte"
    write_idx(images, x.reshape(-1, 28, 28).astype(np.uint8))
    write_idx(labels, y.astype(np.uint8))
    return images, labels


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    for p in export(sys.argv[1]):
        print(p)

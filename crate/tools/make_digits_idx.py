#!/usr/bin/env python3
"""Export handwritten digits 0-4 from sklearn's bundled digits corpus as IDX files.

The 8x8 images are bilinearly upscaled to 28x28 and written in the classic
IDX byte layout (big-endian magic 0x00000803 / 0x00000801, dimension sizes,
unsigned-byte payload). Output goes to crates/core/tests/data/.
"""

import struct
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits

OUT_DIR = Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "data"
SIZE = 28
DIGITS = (0, 1, 2, 3, 4)


def upscale(img8: np.ndarray) -> np.ndarray:
    # sklearn digits pixels are 0..16; rescale to 0..255 before resampling
    img = Image.fromarray((img8 / 16.0 * 255.0).round().astype(np.uint8), mode="L")
    return np.asarray(img.resize((SIZE, SIZE), Image.BILINEAR), dtype=np.uint8)


def write_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.tobytes())


def write_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    data = load_digits()
    mask = np.isin(data.target, DIGITS)
    images = np.stack([upscale(img) for img in data.images[mask]])
    labels = data.target[mask]
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    write_images(OUT_DIR / "digits04_images.idx", images)
    write_labels(OUT_DIR / "digits04_labels.idx", labels)
    print(f"wrote {len(labels)} images to {OUT_DIR}")


if __name__ == "__main__":
    main()

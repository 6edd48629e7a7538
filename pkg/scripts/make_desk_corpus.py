"""Build the desk-scale corpus from the images bundled with scikit-image.

train/  64 crops of 96x96 (8 per source image, 2x downsampled sources)
test/    8 crops of 96x96, one per source image not used for training
large/  a 256x256 and a 321x481 image for size-agnostic inference

Usage: python scripts/make_desk_corpus.py [OUT_DIR]   (default: data/desk)
"""

import sys
from pathlib import Path

import numpy as np
import skimage.data as skd

from convcs.imageio import LUMA, write_pgm

TRAIN_SOURCES = ["astronaut", "chelsea", "coffee", "coins", "rocket", "clock", "brick",
                 "motorcycle_left"]
TEST_SOURCES = ["camera", "moon", "gravel", "cell", "immunohistochemistry", "retina", "grass", "page"]
PATCH = 96


def gray(name):
    if name == "motorcycle_left":
        img = skd.stereo_motorcycle()[0]
    else:
        img = getattr(skd, name)()
    img = img.astype(np.float64) / 255.0
    if img.ndim == 3:
        img = img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]
    return img


def halve(img):
    if min(img.shape) // 2 < PATCH:
        return img
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    return img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def crops(img, count, rng):
    h, w = img.shape
    for _ in range(count):
        top = int(rng.integers(0, h - PATCH + 1))
        left = int(rng.integers(0, w - PATCH + 1))
        yield img[top:top + PATCH, left:left + PATCH]


def main(out="data/desk"):
    out = Path(out)
    rng = np.random.default_rng(2018)
    for name in TRAIN_SOURCES:
        for i, c in enumerate(crops(halve(gray(name)), 8, rng)):
            write_pgm(out / "train" / f"{name}_{i}.pgm", c)
    for name in TEST_SOURCES:
        (c,) = crops(halve(gray(name)), 1, rng)
        write_pgm(out / "test" / f"{name}.pgm", c)
    write_pgm(out / "large" / "camera_256.pgm", halve(gray("camera")))
    retina = halve(gray("retina"))
    write_pgm(out / "large" / "retina_321x481.pgm", retina[150:150 + 321, 100:100 + 481])


if __name__ == "__main__":
    main(*sys.argv[1:])

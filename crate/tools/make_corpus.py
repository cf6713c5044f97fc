#!/usr/bin/env python3
"""Regenerates the bundled grayscale PGM test corpora from scikit-image sample photos.

Color sources are converted to luma with BT.601 weights and rounded to 8 bits.
Crops are taken at native resolution so local statistics stay photographic.
"""
import os
import numpy as np
from skimage import data

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "data")


def luma(img):
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.uint8)
    rgb = img[..., :3].astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, arr):
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


SOURCES = {
    "astronaut": data.astronaut,
    "camera": data.camera,
    "chelsea": data.chelsea,
    "coffee": data.coffee,
    "rocket": data.rocket,
    "motorcycle": lambda: data.stereo_motorcycle()[0],
    "coins": data.coins,
    "moon": data.moon,
    "ihc": data.immunohistochemistry,
    "retina": data.retina,
    "gravel": data.gravel,
}

# (source, top, left) crops of size SIZE.
CORPUS = [
    ("astronaut", 40, 160), ("astronaut", 300, 60), ("astronaut", 260, 300),
    ("camera", 60, 200), ("camera", 300, 80), ("camera", 250, 100),
    ("chelsea", 40, 40), ("chelsea", 140, 200),
    ("coffee", 60, 80), ("coffee", 200, 300), ("coffee", 250, 450),
    ("rocket", 250, 100), ("rocket", 290, 250),
    ("motorcycle", 100, 200), ("motorcycle", 300, 450), ("motorcycle", 200, 600),
    ("coins", 60, 60), ("coins", 150, 200),
    ("motorcycle", 350, 100), ("ihc", 300, 300),
]
# Training crops are smaller and more numerous than the corpus crops so a
# desk-sized run still sees many scenes. None overlaps a corpus crop.
TRAIN = [
    ("astronaut", 60, 57), ("astronaut", 357, 224), ("astronaut", 217, 66), ("astronaut", 180, 416),
    ("astronaut", 439, 279), ("astronaut", 446, 123), ("camera", 156, 353), ("camera", 206, 230),
    ("camera", 422, 366), ("camera", 376, 246), ("camera", 441, 440), ("camera", 60, 91),
    ("chelsea", 73, 214), ("chelsea", 170, 91), ("chelsea", 210, 336), ("chelsea", 133, 349),
    ("chelsea", 236, 84), ("chelsea", 211, 6), ("coffee", 1, 535), ("coffee", 30, 246),
    ("coffee", 288, 29), ("coffee", 64, 454), ("coffee", 24, 315), ("coffee", 314, 170),
    ("rocket", 112, 51), ("rocket", 181, 14), ("rocket", 336, 35), ("rocket", 315, 516),
    ("rocket", 269, 15), ("rocket", 131, 169), ("motorcycle", 286, 334), ("motorcycle", 125, 578),
    ("motorcycle", 408, 295), ("motorcycle", 436, 506), ("motorcycle", 383, 27), ("motorcycle", 46, 45),
    ("coins", 234, 78), ("coins", 40, 271), ("coins", 81, 204), ("coins", 215, 3),
    ("coins", 14, 190), ("moon", 92, 64), ("moon", 165, 46), ("moon", 336, 177),
    ("moon", 424, 64), ("moon", 269, 224), ("moon", 99, 256), ("ihc", 170, 129),
    ("ihc", 205, 351), ("ihc", 413, 17), ("ihc", 435, 154), ("ihc", 85, 352),
    ("ihc", 252, 231), ("retina", 426, 1176), ("retina", 646, 442), ("retina", 1299, 419),
    ("retina", 862, 226), ("retina", 145, 1059), ("retina", 866, 634), ("gravel", 414, 120),
    ("gravel", 153, 321), ("gravel", 147, 431), ("gravel", 229, 368),
]
TOY = [("camera", 100, 100), ("coffee", 100, 100), ("chelsea", 100, 100), ("moon", 200, 200)]


def emit(subdir, crops, size):
    out = os.path.join(ROOT, subdir)
    os.makedirs(out, exist_ok=True)
    cache = {}
    for idx, (name, top, left) in enumerate(crops):
        if name not in cache:
            cache[name] = luma(SOURCES[name]())
        src = cache[name]
        crop = src[top:top + size, left:left + size]
        assert crop.shape == (size, size), (name, top, left, src.shape)
        write_pgm(os.path.join(out, "%02d_%s.pgm" % (idx, name)), crop)


if __name__ == "__main__":
    emit("corpus", CORPUS, 128)
    emit("train", TRAIN, 64)
    emit("toy", TOY, 64)

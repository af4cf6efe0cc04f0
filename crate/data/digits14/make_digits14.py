# Regenerates the bundled 14x14 digits IDX files from scikit-learn's copy of
# the UCI optdigits test set (8x8, 1797 images). Needs numpy, scikit-learn, pillow.
import struct

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits

d = load_digits()
imgs = []
for im in d.images:
    a = (im / 16.0 * 255).astype(np.uint8)
    p = Image.fromarray(a).resize((14, 14), Image.BILINEAR)
    imgs.append(np.asarray(p, dtype=np.uint8))
imgs = np.stack(imgs)
labels = d.target.astype(np.uint8)
perm = np.random.RandomState(0).permutation(len(imgs))
imgs, labels = imgs[perm], labels[perm]
ntr = 1400


def w_img(fn, x):
    with open(fn, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(x), 14, 14))
        f.write(x.tobytes())


def w_lab(fn, y):
    with open(fn, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(y)))
        f.write(y.tobytes())


w_img("train-images.idx3-ubyte", imgs[:ntr])
w_lab("train-labels.idx1-ubyte", labels[:ntr])
w_img("test-images.idx3-ubyte", imgs[ntr:])
w_lab("test-labels.idx1-ubyte", labels[ntr:])

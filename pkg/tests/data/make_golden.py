"""Regenerate the golden dataset samples and their expected values.

The expected values are read byte by byte in plain Python, independently of
the numpy-based readers under test.  Run from this directory.
"""

import gzip
import json
import random
import struct

rnd = random.Random(20261015)

recs = bytearray()
for _ in range(5):
    recs.append(rnd.randrange(10))
    recs.extend(rnd.randrange(256) for _ in range(3072))
open("cifar_golden.bin", "wb").write(bytes(recs))

imgs = struct.pack(">IIII", 0x803, 4, 28, 28) + bytes(rnd.randrange(256) for _ in range(4 * 784))
labs = struct.pack(">II", 0x801, 4) + bytes(rnd.randrange(10) for _ in range(4))
open("mnist_golden-images-idx3-ubyte", "wb").write(imgs)
open("mnist_golden-labels-idx1-ubyte", "wb").write(labs)
open("mnist_golden-images-idx3-ubyte.gz", "wb").write(gzip.compress(imgs, mtime=0))

raw = open("cifar_golden.bin", "rb").read()
cifar = []
for r in range(5):
    rec = raw[r * 3073:(r + 1) * 3073]

    def px(c, y, x):
        return rec[1 + c * 1024 + y * 32 + x]

    four = [px(0, 0, 0), px(1, 0, 1), px(2, 31, 31), px(0, 16, 7)]
    cifar.append({"label": rec[0], "four_pixels": four, "checksum": sum(four), "sum_all": sum(rec[1:])})

raw = open("mnist_golden-images-idx3-ubyte", "rb").read()
hist = [0] * 16
for b in raw[16:16 + 784]:
    hist[b // 16] += 1
labraw = open("mnist_golden-labels-idx1-ubyte", "rb").read()
golden = {
    "cifar": cifar,
    "mnist": {
        "first_image_hist16": hist,
        "labels": list(labraw[8:]),
        "label_magic": int.from_bytes(labraw[:4], "big"),
        "pixel_5_5_img2": raw[16 + 2 * 784 + 5 * 28 + 5],
    },
}
json.dump(golden, open("golden.json", "w"), indent=1)

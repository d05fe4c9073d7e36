"""Convert the per-class JSON dump of Fashion-MNIST (npm package ``fashion-mnist``) to IDX files.

    python tools/fashion_from_json.py <package>/src/clothes <out_dir>
    rtmoe fetch fashion --from <out_dir>

Each ``<class>.json`` holds 7000 images as 784-long pixel lists, with empty
entries used as separators in some files. The first 1000 images of a class
are taken as its test images and the remaining 6000 as training images. This
matches the official per-class split sizes; whether it reproduces the exact
official partition cannot be checked offline.
"""
import json
import sys
from pathlib import Path

import numpy as np

from rtmoe.data import IDX_FILES, write_idx

N_TEST = 1000


def main(src, out):
    src, out = Path(src), Path(out)
    parts = {"train": ([], []), "test": ([], [])}
    for label in range(10):
        rows = [r for r in json.loads((src / f"{label}.json").read_text())["data"] if len(r) == 784]
        if len(rows) != 7000:
            sys.exit(f"class {label}: expected 7000 images, found {len(rows)}")
        img = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
        for split, chunk in (("test", img[:N_TEST]), ("train", img[N_TEST:])):
            parts[split][0].append(chunk)
            parts[split][1].append(np.full(len(chunk), label, dtype=np.uint8))
    for split, (images, labels) in parts.items():
        for fname, arr in zip(IDX_FILES[split], (np.concatenate(images), np.concatenate(labels))):
            write_idx(out / fname[:-3], arr)
        print(f"{split}: {sum(len(x) for x in labels)} images")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(*sys.argv[1:])

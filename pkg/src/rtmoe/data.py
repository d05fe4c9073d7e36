"""Dataset files, parsing and batching.

Cache layout under ``$RTMOE_DATA`` (default ``~/.cache/rtmoe``)::

    mnist/    train-images-idx3-ubyte.gz  train-labels-idx1-ubyte.gz
              t10k-images-idx3-ubyte.gz   t10k-labels-idx1-ubyte.gz
    fashion/  (same four files)
              uncompressed copies without the .gz suffix are accepted too
    digits/   (same four files, built offline from scikit-learn's 8x8 digits)
    cifar10/  cifar-10-batches-bin/data_batch_{1..5}.bin, test_batch.bin

Nothing here touches the network except :func:`fetch`.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import os
import shutil
import struct
import tarfile
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
DATASETS = ("mnist", "fashion", "cifar10", "digits")
IDX_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}


class DataError(Exception):
    pass


class FormatError(DataError):
    pass


class DataMissing(DataError):
    pass


def cache_dir(root=None) -> Path:
    return Path(root or os.environ.get("RTMOE_DATA") or Path.home() / ".cache" / "rtmoe")


def _open(path):
    path = Path(path)
    if not path.exists() and path.suffix == ".gz" and path.with_suffix("").exists():
        path = path.with_suffix("")
    if not path.exists():
        raise DataMissing(f"{path} not found")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(path, expect: int | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) of unsigned bytes."""
    with _open(path) as f:
        buf = f.read()
    if len(buf) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic >> 8 != 0x08 or magic & 0xFF not in (1, 3):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    if expect is not None and magic != expect:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expect:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    n = int(np.prod(dims))
    if len(buf) - head != n:
        raise FormatError(f"{path}: expected {n} data bytes, found {len(buf) - head}")
    return np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    if arr.ndim not in (1, 3):
        raise ValueError("IDX writer supports label vectors and image stacks only")
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + arr.tobytes())


def load_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    with _open(path) as f:
        buf = f.read()
    if len(buf) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].copy()


def write_cifar_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8).reshape(len(images), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(rec.tobytes())


def load_cifar10(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = [load_cifar_batch(d / n) for n in names]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


@dataclass
class Dataset:
    images: np.ndarray        # float32 in [0, 1] (unless standardised), (N, C, H, W)
    labels: np.ndarray        # int64
    name: str = ""
    split: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.name, split or self.split, dict(self.meta))


def _load_raw(name: str, root, split: str):
    base = cache_dir(root) / name
    if not base.is_dir():
        raise DataMissing(f"{base} does not exist; run `rtmoe fetch {name}` first")
    if name == "cifar10":
        return load_cifar10(base, split)
    img_file, lab_file = IDX_FILES[split]
    images = load_idx(base / img_file, IDX_IMAGES)[:, None]
    labels = load_idx(base / lab_file, IDX_LABELS)
    if len(images) != len(labels):
        raise FormatError(f"{name}/{split}: {len(images)} images but {len(labels)} labels")
    return images, labels


def load_dataset(name: str, split: str = "train", root=None, val_fraction: float = 0.1,
                 seed: int = 0, standardize: bool = False) -> Dataset:
    """Load ``train``, ``val`` or ``test``; ``val`` is a seeded 10% hold-out of train."""
    if name not in DATASETS:
        raise DataError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if split not in ("train", "val", "test"):
        raise DataError(f"unknown split {split!r}")
    images, labels = _load_raw(name, root, "test" if split == "test" else "train")
    if labels.size and labels.max() > 9:
        raise FormatError(f"{name}: label {labels.max()} out of range")
    ds = Dataset(images.astype(np.float32) / 255.0, labels.astype(np.int64), name, split,
                 {"standardized": standardize})
    if standardize:
        # statistics always come from the training images
        ref = ds.images if split != "test" else _load_raw(name, root, "train")[0].astype(np.float32) / 255.0
        mean = ref.mean(axis=(0, 2, 3), keepdims=True)
        std = ref.std(axis=(0, 2, 3), keepdims=True) + 1e-8
        ds.images = (ds.images - mean) / std
    if split == "test":
        return ds
    order = np.random.default_rng(seed).permutation(len(ds))
    n_val = int(round(len(ds) * val_fraction))
    keep = order[len(ds) - n_val:] if split == "val" else order[:len(ds) - n_val]
    return ds.subset(np.sort(keep), split)


def index_batches(n: int, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0):
    """Index arrays covering ``range(n)``; the last batch may be short."""
    idx = np.arange(n)
    if shuffle_seed is not None:
        idx = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def batches(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None, epoch: int = 0):
    for idx in index_batches(len(dataset), batch_size, shuffle_seed, epoch):
        yield dataset.images[idx], dataset.labels[idx]


# --- fetching -------------------------------------------------------------

def manifest() -> dict:
    return json.loads(resources.files("rtmoe").joinpath("manifest.json").read_text())


def _md5(path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch(name: str, root=None, log=print, source=None) -> Path:
    """Download a dataset into the cache and verify pinned checksums.

    With ``source``, copy the files from a local directory instead; each may
    be gzipped or not and must match the pin for whichever form it is in.
    """
    target = cache_dir(root) / name
    if name == "digits":
        return build_digits(target)
    spec = manifest().get(name)
    if spec is None:
        raise DataError(f"no download manifest for {name!r}")
    target.mkdir(parents=True, exist_ok=True)
    if source is not None:
        return _import_local(name, spec, Path(source), target, log)
    for fname, md5 in spec["files"].items():
        dest = target / fname
        if not dest.exists() or _md5(dest) != md5:
            url = spec["url"] + fname
            log(f"downloading {url}")
            try:
                urllib.request.urlretrieve(url, dest)
            except OSError as exc:
                raise DataMissing(f"could not download {url}: {exc}") from exc
        if _md5(dest) != md5:
            raise FormatError(f"{dest}: checksum mismatch")
        if fname.endswith(".tar.gz"):
            with tarfile.open(dest) as tar:
                tar.extractall(target, filter="data")
    return target


def _import_local(name: str, spec: dict, source: Path, target: Path, log) -> Path:
    raw_pins = spec.get("raw", {})
    for fname, md5 in spec["files"].items():
        plain = fname[:-3] if fname.endswith(".gz") else fname
        if (source / fname).exists():
            src, pin, dest = source / fname, md5, target / fname
        elif (source / plain).exists():
            src, pin, dest = source / plain, raw_pins.get(plain), target / plain
        else:
            raise DataMissing(f"{source}: neither {fname} nor {plain} found")
        digest = _md5(src)
        if pin is None:
            log(f"{src}: no pinned checksum for this form, md5 {digest} (unverified)")
        elif digest != pin:
            raise FormatError(f"{src}: checksum mismatch ({digest} != {pin})")
        shutil.copyfile(src, dest)
        if dest.name.endswith(".tar.gz"):
            with tarfile.open(dest) as tar:
                tar.extractall(target, filter="data")
    log(f"imported {name} from {source}")
    return target


def build_digits(target) -> Path:
    """Offline stand-in dataset: scikit-learn's 8x8 digits upscaled to 28x28 IDX files.

    Useful for smoke runs; it is not MNIST and says nothing about MNIST accuracy.
    """
    try:
        from sklearn.datasets import load_digits
    except ImportError as exc:
        raise DataMissing("the digits dataset needs scikit-learn") from exc
    d = load_digits()
    img = np.kron(d.images, np.ones((3, 3)))                 # 24x24
    img = np.pad(img, ((0, 0), (2, 2), (2, 2))) * (255 / 16)  # 28x28, 0..255
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    order = np.random.default_rng(1234).permutation(len(img))
    n_test = len(img) // 5
    test, train = order[:n_test], order[n_test:]
    target = Path(target)
    for split, idx in (("train", train), ("test", test)):
        write_idx(target / IDX_FILES[split][0], img[idx])
        write_idx(target / IDX_FILES[split][1], d.target[idx].astype(np.uint8))
    return target

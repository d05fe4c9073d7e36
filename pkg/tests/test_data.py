import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtmoe import data
from rtmoe.data import DataMissing, FormatError


def fake_idx_dataset(root, name="mnist", n_train=50, n_test=20, gz=True, seed=0):
    rng = np.random.default_rng(seed)
    for split, n in (("train", n_train), ("test", n_test)):
        img_name, lab_name = data.IDX_FILES[split]
        if not gz:
            img_name, lab_name = img_name[:-3], lab_name[:-3]
        data.write_idx(root / name / img_name, rng.integers(0, 256, (n, 28, 28), dtype=np.uint8))
        data.write_idx(root / name / lab_name, rng.integers(0, 10, n, dtype=np.uint8))
    return root


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 6), h=st.integers(1, 5), w=st.integers(1, 5), gz=st.booleans())
def test_idx_round_trip(tmp_path_factory, n, h, w, gz):
    d = tmp_path_factory.mktemp("idx")
    arr = np.random.default_rng(n).integers(0, 256, (n, h, w), dtype=np.uint8)
    path = d / ("a.idx.gz" if gz else "a.idx")
    data.write_idx(path, arr)
    np.testing.assert_array_equal(data.load_idx(path, data.IDX_IMAGES), arr)


def test_idx_header_layout(tmp_path):
    data.write_idx(tmp_path / "l", np.array([3, 1, 4], dtype=np.uint8))
    raw = (tmp_path / "l").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x01" and raw[4:8] == b"\x00\x00\x00\x03" and raw[8:] == b"\x03\x01\x04"


def test_wrong_magic_rejected(tmp_path):
    data.write_idx(tmp_path / "labels", np.zeros(5, dtype=np.uint8))
    with pytest.raises(FormatError, match="expected 0x00000803"):
        data.load_idx(tmp_path / "labels", data.IDX_IMAGES)
    (tmp_path / "junk").write_bytes(b"\x12\x34\x56\x78" + bytes(8))
    with pytest.raises(FormatError, match="bad IDX magic"):
        data.load_idx(tmp_path / "junk")


def test_truncated_idx_rejected(tmp_path):
    data.write_idx(tmp_path / "x", np.zeros((2, 4, 4), dtype=np.uint8))
    raw = (tmp_path / "x").read_bytes()
    (tmp_path / "x").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="expected 32 data bytes"):
        data.load_idx(tmp_path / "x")
    (tmp_path / "y").write_bytes(raw[:6])
    with pytest.raises(FormatError):
        data.load_idx(tmp_path / "y")


def test_cifar_record_round_trip(tmp_path):
    img = np.arange(3 * 32 * 32, dtype=np.int64).reshape(1, 3, 32, 32) % 256
    data.write_cifar_batch(tmp_path / "b.bin", img, [7])
    assert (tmp_path / "b.bin").stat().st_size == data.CIFAR_RECORD
    images, labels = data.load_cifar_batch(tmp_path / "b.bin")
    assert labels.tolist() == [7]
    np.testing.assert_array_equal(images, img)
    # channel-major: the first 1024 bytes are red
    assert images[0, 0, 0, :3].tolist() == [0, 1, 2] and images[0, 1, 0, 0] == 1024 % 256


def test_cifar_bad_record_size(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes(data.CIFAR_RECORD + 5))
    with pytest.raises(FormatError, match="not a multiple"):
        data.load_cifar_batch(tmp_path / "b.bin")


def test_batches_cover_everything():
    sizes = [len(i) for i in data.index_batches(10, 4)]
    assert sizes == [4, 4, 2]
    a = np.concatenate(list(data.index_batches(10, 4, shuffle_seed=3)))
    b = np.concatenate(list(data.index_batches(10, 4, shuffle_seed=3)))
    c = np.concatenate(list(data.index_batches(10, 4, shuffle_seed=4)))
    np.testing.assert_array_equal(a, b)
    assert sorted(a) == list(range(10))
    assert not np.array_equal(a, c)
    e1 = np.concatenate(list(data.index_batches(10, 4, shuffle_seed=3, epoch=1)))
    assert not np.array_equal(a, e1)


def test_splits_are_disjoint_and_deterministic(tmp_path):
    fake_idx_dataset(tmp_path)
    tr = data.load_dataset("mnist", "train", root=tmp_path, seed=1)
    va = data.load_dataset("mnist", "val", root=tmp_path, seed=1)
    assert len(tr) == 45 and len(va) == 5
    assert tr.images.shape == (45, 1, 28, 28) and tr.images.dtype == np.float32
    assert 0 <= tr.images.min() and tr.images.max() <= 1
    va2 = data.load_dataset("mnist", "val", root=tmp_path, seed=1)
    np.testing.assert_array_equal(va.images, va2.images)
    rows = {r.tobytes() for r in tr.images}
    assert not any(r.tobytes() in rows for r in va.images)
    other = data.load_dataset("mnist", "val", root=tmp_path, seed=2)
    assert not np.array_equal(va.labels, other.labels) or not np.array_equal(va.images, other.images)
    assert len(data.load_dataset("mnist", "test", root=tmp_path)) == 20


def test_standardize_uses_training_statistics(tmp_path):
    fake_idx_dataset(tmp_path)
    tr = data.load_dataset("mnist", "train", root=tmp_path, val_fraction=0.0, standardize=True)
    te = data.load_dataset("mnist", "test", root=tmp_path, standardize=True)
    assert abs(tr.images.mean()) < 1e-5 and abs(tr.images.std() - 1) < 1e-4
    raw_tr = data.load_dataset("mnist", "train", root=tmp_path, val_fraction=0.0)
    raw_te = data.load_dataset("mnist", "test", root=tmp_path)
    expected = (raw_te.images - raw_tr.images.mean()) / raw_tr.images.std()
    np.testing.assert_allclose(te.images, expected, rtol=1e-4, atol=1e-4)


def test_uncompressed_files_accepted(tmp_path):
    fake_idx_dataset(tmp_path, gz=False)
    a = data.load_dataset("mnist", "test", root=tmp_path)
    fake_idx_dataset(tmp_path / "gz", gz=True)
    b = data.load_dataset("mnist", "test", root=tmp_path / "gz")
    np.testing.assert_array_equal(a.images, b.images)


def test_missing_dataset_message(tmp_path):
    with pytest.raises(DataMissing, match="rtmoe fetch fashion"):
        data.load_dataset("fashion", root=tmp_path)
    with pytest.raises(data.DataError):
        data.load_dataset("imagenet", root=tmp_path)


def test_label_count_mismatch(tmp_path):
    fake_idx_dataset(tmp_path)
    data.write_idx(tmp_path / "mnist" / data.IDX_FILES["test"][1], np.zeros(3, dtype=np.uint8))
    with pytest.raises(FormatError, match="labels"):
        data.load_dataset("mnist", "test", root=tmp_path)


def _md5(b):
    return hashlib.md5(b).hexdigest()


def test_fetch_from_local_checks_pins(tmp_path, monkeypatch):
    src = tmp_path / "src"
    fake_idx_dataset(src, gz=False)
    files = {f: None for pair in data.IDX_FILES.values() for f in pair}
    raw = {f[:-3]: _md5((src / "mnist" / f[:-3]).read_bytes()) for f in files}
    monkeypatch.setattr(data, "manifest", lambda: {"mnist": {"url": "", "files": files, "raw": raw}})
    out = data.fetch("mnist", root=tmp_path / "cache", log=lambda m: None, source=src / "mnist")
    assert len(data.load_dataset("mnist", "test", root=out.parent)) == 20

    raw[next(iter(raw))] = "0" * 32
    with pytest.raises(FormatError, match="checksum mismatch"):
        data.fetch("mnist", root=tmp_path / "cache2", log=lambda m: None, source=src / "mnist")


def test_fetch_from_local_unpinned_is_logged(tmp_path, monkeypatch):
    src = tmp_path / "src"
    fake_idx_dataset(src, gz=False)
    files = {f: "x" for pair in data.IDX_FILES.values() for f in pair}
    monkeypatch.setattr(data, "manifest", lambda: {"mnist": {"url": "", "files": files}})
    msgs = []
    data.fetch("mnist", root=tmp_path / "cache", log=msgs.append, source=src / "mnist")
    assert sum("unverified" in m for m in msgs) == 4


def test_fetch_from_local_missing_file(tmp_path, monkeypatch):
    monkeypatch.setattr(data, "manifest", lambda: {"mnist": {"url": "", "files": {"a.gz": "x"}}})
    with pytest.raises(DataMissing, match="neither"):
        data.fetch("mnist", root=tmp_path, log=lambda m: None, source=tmp_path / "nowhere")


def test_manifest_pins_are_well_formed():
    m = data.manifest()
    for name in ("mnist", "fashion", "cifar10"):
        assert m[name]["files"]
        for md5 in list(m[name]["files"].values()) + list(m[name].get("raw", {}).values()):
            assert len(md5) == 32 and int(md5, 16) >= 0

import numpy as np
import pytest
from PIL import Image

from afg_lab.data import (ImageExample, IngestOptions, load_dataset, load_split, make_synthetic, normalize_u8,
                          save_split, select_classes, split_indices, synthesize_image, SYNTHETIC_CLASSES)
from afg_lab.errors import FormatError, InputError, ValidationError
from afg_lab.rng import shuffled


def _write_dir(root, per_class=(4, 4, 4)):
    rng = np.random.default_rng(0)
    for c, n in enumerate(per_class):
        d = root / f"c{c}"
        d.mkdir(parents=True)
        for i in range(n):
            Image.fromarray(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(d / f"{i}.png")


def test_normalize_u8_endpoints():
    out = normalize_u8(np.array([0, 128, 255], np.uint8))
    assert out.dtype == np.float32
    assert out[0] == 0 and out[2] == 1 and out[1] == np.float32(128 / 255)


@pytest.mark.parametrize("pix", [np.full((2, 2, 1), 1.5), np.zeros((2, 2)), np.full((2, 2, 1), np.nan)])
def test_image_example_rejects(pix):
    with pytest.raises(ValidationError):
        ImageExample(pix, 0)


def test_split_indices_counts_and_replay():
    tr, te = split_indices(10, 0.75, 5, 2)
    assert len(tr) == 8 and len(te) == 2  # round(7.5) == 8
    assert sorted(tr + te) == list(range(10))
    order = shuffled(range(10), 5 * 1_000_003 + 2)
    assert tr == order[:8]


def test_split_indices_clamps():
    assert len(split_indices(3, 0.99, 0, 0)[1]) == 1
    assert len(split_indices(3, 0.01, 0, 0)[0]) == 1
    with pytest.raises(ValidationError):
        split_indices(1, 0.5, 0, 0)


def test_load_directory(tmp_path):
    _write_dir(tmp_path / "ds")
    split = load_dataset(tmp_path / "ds", IngestOptions(0.5, 1))
    assert split.class_names == ["c0", "c1", "c2"]
    assert len(split.train) == len(split.test) == 6
    uids = {e.uid for e in split.train} | {e.uid for e in split.test}
    assert len(uids) == 12
    again = load_dataset(tmp_path / "ds", IngestOptions(0.5, 1))
    assert [e.uid for e in again.train] == [e.uid for e in split.train]


def test_load_directory_errors(tmp_path):
    with pytest.raises(InputError):
        load_dataset(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValidationError):
        load_dataset(tmp_path / "empty")
    (tmp_path / "bad" / "c0").mkdir(parents=True)
    (tmp_path / "bad" / "c0" / "x.png").write_bytes(b"not a png")
    with pytest.raises(InputError):
        load_dataset(tmp_path / "bad")


def test_raw_binary(tmp_path):
    rng = np.random.default_rng(1)
    recs = []
    for lab in [0, 1, 0, 1]:
        planar = rng.integers(0, 256, (3, 2, 2), dtype=np.uint8)
        recs.append(bytes([lab]) + planar.tobytes())
    (tmp_path / "data.bin").write_bytes(b"".join(recs))
    (tmp_path / "batches.meta.txt").write_text("cat\ndog\n")
    split = load_dataset(tmp_path / "data.bin", IngestOptions(0.5, 0, (2, 2, 3)))
    assert split.class_names == ["cat", "dog"]
    ex = {e.uid: e for e in split.train + split.test}["data.bin#0"]
    planar = np.frombuffer(recs[0][1:], np.uint8).reshape(3, 2, 2)
    assert np.array_equal(ex.pixels, planar.transpose(1, 2, 0) / np.float32(255))
    (tmp_path / "short.bin").write_bytes(b"".join(recs)[:-1])
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "short.bin", IngestOptions(0.5, 0, (2, 2, 3)))


def test_select_classes_reindexes(tmp_path):
    _write_dir(tmp_path / "ds", (3, 3, 3, 3))
    split = load_dataset(tmp_path / "ds", IngestOptions(0.67, 0))
    sub = select_classes(split, 2, 9)
    chosen = sorted(shuffled(range(4), 9)[:2])
    assert sub.class_names == [f"c{c}" for c in chosen]
    assert {e.label for e in sub.train} == {0, 1}
    for e in sub.train:
        assert e.uid.startswith(sub.class_names[e.label] + "/")
    with pytest.raises(ValidationError):
        select_classes(split, 5, 0)


def test_save_load_split(tmp_path):
    _write_dir(tmp_path / "ds")
    split = load_dataset(tmp_path / "ds")
    save_split(split, tmp_path / "out")
    back = load_split(tmp_path / "out")
    assert [e.uid for e in back.test] == [e.uid for e in split.test]
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(back.train, split.train))


def test_synthetic_is_seeded(tmp_path):
    a = synthesize_image("rings", np.random.default_rng(3), 16)
    b = synthesize_image("rings", np.random.default_rng(3), 16)
    assert a.dtype == np.uint8 and a.shape == (16, 16, 3) and np.array_equal(a, b)
    make_synthetic(tmp_path / "syn", per_class=2, size=8, classes=SYNTHETIC_CLASSES[:3])
    split = load_dataset(tmp_path / "syn", IngestOptions(0.5, 0))
    assert split.num_classes == 3 and len(split.train) == 3

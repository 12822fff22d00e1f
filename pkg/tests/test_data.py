import copy
import itertools

import numpy as np
import pytest

from udcnet.data import (Entry, Manifest, ManifestError, PhantomConfig, VolumeFormatError,
                         generate_case, generate_dataset, random_patch, read_manifest,
                         read_volume, sliding_positions, sliding_window_predict, write_volume)
from udcnet.data.phantom import lesion_field
from udcnet.data.volume_io import HEADER


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.int16])
def test_volume_round_trip(tmp_path, dtype):
    rng = np.random.default_rng(0)
    data = (rng.standard_normal((16, 16, 16)) * 50).astype(dtype)
    write_volume(tmp_path / "v.vol", data, spacing=(0.7, 0.8, 2.5))
    vol = read_volume(tmp_path / "v.vol")
    assert vol.data.dtype == dtype and vol.data.tobytes() == data.tobytes()
    assert vol.spacing == pytest.approx((0.7, 0.8, 2.5))


def test_volume_errors(tmp_path):
    data = np.zeros((4, 5, 6), np.float32)
    path = tmp_path / "v.vol"
    write_volume(path, data)
    raw = path.read_bytes()
    (tmp_path / "cut.vol").write_bytes(raw[:-10])
    with pytest.raises(VolumeFormatError, match=r"payload is 470 bytes, expected 480"):
        read_volume(tmp_path / "cut.vol")
    (tmp_path / "magic.vol").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(VolumeFormatError, match="bad magic"):
        read_volume(tmp_path / "magic.vol")
    big = bytearray(raw)
    HEADER.pack_into(big, 0, b"UDCV", 1, 3, 1 << 20, 1 << 20, 1 << 20, 1.0, 1.0, 1.0)
    (tmp_path / "huge.vol").write_bytes(bytes(big))
    with pytest.raises(VolumeFormatError, match="out of range"):
        read_volume(tmp_path / "huge.vol")
    with pytest.raises(VolumeFormatError):
        write_volume(tmp_path / "x.vol", np.zeros((2, 2)))


SMALL = PhantomConfig(extent=16, radius=(1.5, 3.5))


def test_label_is_the_generative_region():
    rng = np.random.default_rng(4)
    twin = copy.deepcopy(rng)
    _, label = generate_case(PhantomConfig(), rng)
    lo, hi = PhantomConfig().foreground_fraction
    while True:
        field = lesion_field(PhantomConfig(), twin)
        if lo <= (field <= 1).mean() <= hi:
            break
    np.testing.assert_array_equal(label, (field <= 1).astype(np.uint8))


def test_foreground_fraction_in_range():
    cfg = PhantomConfig()
    rng = np.random.default_rng(1)
    for _ in range(100):
        image, label = generate_case(cfg, rng)
        assert image.dtype == np.float32 and label.dtype == np.uint8
        assert cfg.foreground_fraction[0] <= label.mean() <= cfg.foreground_fraction[1]
        assert label.any()


def test_dataset_counts_and_determinism(tmp_path):
    counts = {"labeled_train": 10, "unlabeled_train": 50, "val": 3, "test": 10}
    man = generate_dataset(SMALL, counts, 7, tmp_path / "a")
    images = sum(len(man.entries(s)) for s in counts)
    labels = sum(e.label is not None for s in counts for e in man.entries(s))
    assert (images, labels) == (73, 23)
    back = read_manifest(tmp_path / "a" / "manifest.tsv")
    assert back.counts() == counts and back.seed == 7
    generate_dataset(SMALL, counts, 7, tmp_path / "b")
    for s in counts:
        for e in back.entries(s):
            for rel in (e.image, e.label):
                if rel:
                    assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    other = generate_dataset(SMALL, {"labeled_train": 1, "val": 1, "test": 1}, 8, tmp_path / "c")
    a = read_volume(tmp_path / "a" / man.entries("labeled_train")[0].image).data
    c = read_volume(tmp_path / "c" / other.entries("labeled_train")[0].image).data
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        generate_dataset(SMALL, {"labeled_train": 1, "val": 0, "test": 1}, 0, tmp_path / "d")


def test_manifest_validation(tmp_path):
    man = Manifest()
    man.splits["val"].append(Entry("images/a.vol", None))
    with pytest.raises(ManifestError):
        man.validate()
    man = Manifest()
    man.splits["labeled_train"].append(Entry("images/a.vol", "labels/a.vol"))
    man.splits["test"].append(Entry("images/a.vol", "labels/b.vol"))
    with pytest.raises(ManifestError, match="both"):
        man.validate()
    (tmp_path / "m.tsv").write_text("not a manifest\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text("#udc-manifest 1\nbogus\ta\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "m.tsv")


def test_sliding_positions_examples():
    pos = sliding_positions((64, 64, 64), (32, 32, 32), 16)
    assert len(pos) == 27
    assert sorted({p[0] for p in pos}) == [0, 16, 32]
    assert sliding_positions((16, 16, 16), (16, 16, 16), 8) == [(0, 0, 0)]
    assert sorted({p[1] for p in sliding_positions((20, 20, 20), (8, 8, 8), 5)}) == [0, 5, 10, 12]
    with pytest.raises(ValueError, match="pad"):
        sliding_positions((8, 8, 8), (10, 10, 10), 4)


def test_sliding_coverage_random_combos():
    rng = np.random.default_rng(0)
    for _ in range(50):
        patch = tuple(int(v) for v in rng.integers(2, 9, 3))
        shape = tuple(p + int(rng.integers(0, 12)) for p in patch)
        stride = tuple(int(rng.integers(1, p + 1)) for p in patch)
        cover = np.zeros(shape, bool)
        for c in sliding_positions(shape, patch, stride):
            assert all(0 <= ci <= s - p for ci, s, p in zip(c, shape, patch))
            cover[tuple(slice(ci, ci + p) for ci, p in zip(c, patch))] = True
        assert cover.all()


def test_sliding_window_averaging():
    vol = np.random.default_rng(0).random((20, 18, 16))
    const = sliding_window_predict(vol, 8, 3, lambda b: np.full(b.shape, 0.37))
    np.testing.assert_allclose(const, 0.37, rtol=0, atol=1e-15)
    ident = sliding_window_predict(vol, 8, 5, lambda b: b)
    np.testing.assert_allclose(ident, vol, rtol=0, atol=1e-15)


def test_random_patch_foreground_bias():
    rng = np.random.default_rng(0)
    image = np.zeros((32, 32, 32), np.float32)
    label = np.zeros((32, 32, 32), np.uint8)
    label[28:30, 2:4, 15:17] = 1
    hits = 0
    for _ in range(50):
        x, y = random_patch(rng, image, label, 16, foreground_bias=1.0)
        assert x.shape == y.shape == (16, 16, 16)
        hits += y.any()
    assert hits == 50
    x, y = random_patch(rng, image, None, 16)
    assert y is None and x.shape == (16, 16, 16)

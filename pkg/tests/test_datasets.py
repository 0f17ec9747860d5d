import struct

import numpy as np
import pytest

from gemkit import datasets


def test_noiseless_moons_lie_on_half_circles():
    ds = datasets.gen_two_moons(n=400, noise=0.0, n_test=0, n_ood=0, seed=1)
    X, y = ds.subset("train")
    up, lo = X[y == 0], X[y == 1]
    np.testing.assert_allclose(np.hypot(up[:, 0], up[:, 1]), 1.0, atol=1e-12)
    assert np.all(up[:, 1] >= 0)
    np.testing.assert_allclose(np.hypot(lo[:, 0] - 1.0, lo[:, 1] - 0.5), 1.0, atol=1e-12)
    assert np.all(lo[:, 1] <= 0.5)


def test_moons_balanced_and_deterministic():
    a = datasets.gen_two_moons(n=300 * 2, seed=5)
    b = datasets.gen_two_moons(n=300 * 2, seed=5)
    assert a.to_csv() == b.to_csv()
    assert np.bincount(a.subset("train")[1]).tolist() == [300, 300]
    assert datasets.gen_two_moons(seed=6).to_csv() != datasets.gen_two_moons(seed=5).to_csv()


def test_moons_rejects_odd_and_negative_noise():
    with pytest.raises(ValueError):
        datasets.gen_two_moons(n=101)
    with pytest.raises(ValueError):
        datasets.gen_two_moons(noise=-0.1)


def test_ood_cluster_is_far_from_training():
    ds = datasets.gen_two_moons(seed=0)
    Xtr, _ = ds.subset("train")
    Xo = datasets.ood_rows(ds, "cluster")
    assert len(Xo) == 400
    d = np.sqrt(((Xo[:, None, :] - Xtr[None, :, :]) ** 2).sum(-1)).min(axis=1)
    assert np.median(d) > 0.5


def test_ring_rows_tagged_separately():
    ring = {"center": [0.5, 0.25], "radius": 2.0, "width": 0.1, "n": 120}
    ds = datasets.gen_two_moons(n=200, n_test=50, n_ood=30, ring=ring, seed=2)
    r = datasets.ood_rows(ds, "ring")
    assert len(r) == 120 and len(datasets.ood_rows(ds, "cluster")) == 30
    assert abs(np.hypot(r[:, 0] - 0.5, r[:, 1] - 0.25).mean() - 2.0) < 0.05
    assert np.all(ds.y[ds.split == "ood"] == datasets.OOD_LABEL)


def test_splits_partition_rows():
    ds = datasets.gen_two_moons(n=200, n_test=100, n_ood=50, seed=0)
    sizes = {s: int((ds.split == s).sum()) for s in datasets.SPLITS}
    assert sizes == {"train": 200, "val": 0, "test": 100, "ood": 50, "shifted": 0}
    assert sum(sizes.values()) == len(ds.X)


def test_dataset_validation():
    with pytest.raises(ValueError):
        datasets.Dataset(np.zeros((2, 2)), [0, 1], ["train", "bogus"], 2)
    with pytest.raises(ValueError):
        datasets.Dataset(np.zeros((1, 2)), [0], ["ood"], 2)
    with pytest.raises(ValueError):
        datasets.Dataset(np.zeros((1, 2)), [2], ["train"], 2)


def test_blobs_centres_and_counts():
    ds = datasets.gen_blobs(n_classes=4, n_per_class=500, sigma=0.2, seed=3)
    X, y = ds.subset("train")
    centers = np.asarray(ds.meta["centers"])
    for c in range(4):
        np.testing.assert_allclose(X[y == c].mean(axis=0), centers[c], atol=0.05)
    assert np.bincount(y).tolist() == [500] * 4


def test_toy1d_segments():
    ds = datasets.gen_toy1d(n_per_segment=50, n_ood=20, seed=0)
    X, y = ds.subset("train")
    for c, segs in datasets.TOY1D_SEGMENTS.items():
        xc = X[y == c, 0]
        inside = np.zeros(len(xc), dtype=bool)
        for lo, hi in segs:
            inside |= (xc >= lo) & (xc <= hi)
        assert inside.all() and len(xc) == 100
    xo, _ = ds.subset("ood")
    assert np.all((xo >= 4.0) & (xo <= 5.0))


def test_corruption_ladder():
    ds = datasets.gen_two_moons(n=200, n_test=400, n_ood=0, seed=0)
    Xt, yt = ds.subset("test")
    same = datasets.corrupt(ds, datasets.CorruptionSpec(severity=0))
    np.testing.assert_array_equal(same.X, Xt)
    prev = 0.0
    for sev in range(1, 6):
        sh = datasets.corrupt(ds, datasets.CorruptionSpec(severity=sev), seed=1)
        np.testing.assert_array_equal(sh.y, yt)
        assert set(sh.split) == {"shifted"}
        sd = (sh.X - Xt).std()
        assert abs(sd - datasets.SEVERITY_SIGMA[sev]) < 0.15 * datasets.SEVERITY_SIGMA[sev]
        assert sd > prev
        prev = sd


def test_corruption_spec_validation():
    with pytest.raises(ValueError):
        datasets.CorruptionSpec(severity=6)
    with pytest.raises(ValueError):
        datasets.CorruptionSpec(kind="blur")


@pytest.fixture
def idx_files(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(120, 4, 3), dtype=np.uint8)
    imgs[0, 0, 0], imgs[0, 0, 1] = 0, 255
    labels = rng.integers(0, 10, size=120)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    datasets.write_idx(ip, lp, imgs, labels)
    return ip, lp, imgs, labels


def test_idx_roundtrip(idx_files):
    ip, lp, imgs, labels = idx_files
    ds = datasets.load_idx(ip, lp)
    np.testing.assert_array_equal(np.round(ds.X * 255).astype(np.uint8), imgs.reshape(120, 12))
    np.testing.assert_array_equal(ds.y, labels)
    assert ds.X.min() == 0.0 and ds.X.max() == 1.0


def test_idx_limit(idx_files):
    ip, lp, imgs, labels = idx_files
    ds = datasets.load_idx(ip, lp, limit=100)
    assert ds.X.shape == (100, 12)
    np.testing.assert_array_equal(ds.y, labels[:100])


def test_idx_truncated_header_names_offset(tmp_path):
    p = tmp_path / "short.idx"
    p.write_bytes(struct.pack(">II", datasets.IDX_IMAGES_MAGIC, 10))
    with pytest.raises(datasets.IdxFormatError) as e:
        datasets.read_idx_images(p)
    assert e.value.offset == 8
    assert "byte offset 8" in str(e.value)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(struct.pack(">II", 0xDEADBEEF, 1) + b"\x00")
    with pytest.raises(datasets.IdxFormatError) as e:
        datasets.read_idx_labels(p)
    assert e.value.offset == 0


def test_idx_truncated_pixels(idx_files, tmp_path):
    ip = idx_files[0]
    cut = tmp_path / "cut.idx"
    cut.write_bytes(ip.read_bytes()[:-5])
    with pytest.raises(datasets.IdxFormatError):
        datasets.read_idx_images(cut)
    # a limit that stops before the cut is fine
    assert datasets.read_idx_images(cut, limit=10)[0].shape == (10, 12)


def test_idx_count_mismatch(tmp_path, rng):
    ip, lp = tmp_path / "i", tmp_path / "l"
    datasets.write_idx(ip, lp, rng.integers(0, 255, size=(5, 2, 2)), [0, 1, 2, 3, 4])
    lp.write_bytes(struct.pack(">II", datasets.IDX_LABELS_MAGIC, 4) + bytes(4))
    with pytest.raises(datasets.IdxFormatError):
        datasets.load_idx(ip, lp)


def test_csv_header_and_rows():
    ds = datasets.gen_blobs(n_classes=2, n_per_class=3, n_test_per_class=0)
    lines = ds.to_csv().splitlines()
    assert lines[0] == "x0,x1,y,split"
    assert len(lines) == 7
    assert float(lines[1].split(",")[0]) == ds.X[0, 0]

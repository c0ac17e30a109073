import numpy as np
import pytest

from sdnas import datasets


def test_moons_noise_zero_lie_on_half_circles():
    ds = datasets.generate("moons", 100, 0.0, seed=0)
    X, y = ds.features, ds.labels
    outer = X[y == 0]
    inner = X[y == 1]
    assert np.allclose(outer[:, 0] ** 2 + outer[:, 1] ** 2, 1.0, atol=1e-12)
    assert np.all(outer[:, 1] >= -1e-12)
    assert np.allclose((inner[:, 0] - 1.0) ** 2 + (inner[:, 1] - 0.5) ** 2, 1.0, atol=1e-12)
    assert np.all(inner[:, 1] <= 0.5 + 1e-12)


def test_blobs_noise_zero_collapse_to_centroids():
    ds = datasets.generate("blobs", 30, 0.0, seed=1, classes=3)
    for k in range(3):
        pts = ds.features[ds.labels == k]
        assert np.all(pts == pts[0])


def test_blobs_supports_up_to_eight_classes():
    ds = datasets.generate("blobs", 64, 0.1, seed=2, classes=8)
    assert ds.class_count == 8
    assert set(np.unique(ds.labels)) == set(range(8))


def test_spirals_deterministic_bytes():
    a = datasets.generate("spirals", 300, 0.15, seed=9)
    b = datasets.generate("spirals", 300, 0.15, seed=9)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = datasets.generate("spirals", 300, 0.15, seed=10)
    assert a.features.tobytes() != c.features.tobytes()


def test_class_balance_within_one():
    ds = datasets.generate("moons", 101, 0.1, seed=0)
    counts = np.bincount(ds.labels)
    assert counts.max() - counts.min() <= 1
    ds = datasets.generate("blobs", 100, 0.1, seed=0, classes=3)
    counts = np.bincount(ds.labels)
    assert counts.max() - counts.min() <= 1


def test_generate_validation():
    with pytest.raises(ValueError, match="kind"):
        datasets.generate("cifar", 100, 0.1, seed=0)
    with pytest.raises(ValueError, match="noise"):
        datasets.generate("moons", 100, -0.1, seed=0)
    with pytest.raises(ValueError, match="n >="):
        datasets.generate("blobs", 5, 0.1, seed=0, classes=3)
    with pytest.raises(ValueError, match="2-class"):
        datasets.generate("moons", 100, 0.1, seed=0, classes=3)


def test_split_half_and_half():
    ds = datasets.generate("moons", 100, 0.2, seed=0)
    sp = datasets.split(ds, 0.5, seed=0)
    assert len(sp.train_ids) == 50
    assert len(sp.valid_ids) == 50


def test_split_disjoint_and_covering():
    ds = datasets.generate("blobs", 97, 0.2, seed=3, classes=3)
    sp = datasets.split(ds, 0.3, seed=1)
    both = np.concatenate([sp.train_ids, sp.valid_ids])
    assert len(set(both.tolist())) == ds.n
    assert len(both) == ds.n


def test_split_is_stratified():
    ds = datasets.generate("blobs", 90, 0.2, seed=3, classes=3)
    sp = datasets.split(ds, 0.5, seed=1)
    for k in range(3):
        assert np.sum(ds.labels[sp.valid_ids] == k) == 15


def test_split_tiny_fraction_keeps_one_per_class():
    ds = datasets.generate("moons", 10, 0.2, seed=0)
    sp = datasets.split(ds, 1e-9, seed=0)
    for k in range(2):
        assert np.sum(ds.labels[sp.valid_ids] == k) == 1


def test_split_deterministic():
    ds = datasets.generate("moons", 200, 0.2, seed=0)
    a = datasets.split(ds, 0.4, seed=5)
    b = datasets.split(ds, 0.4, seed=5)
    assert np.array_equal(a.train_ids, b.train_ids)
    assert np.array_equal(a.valid_ids, b.valid_ids)
    c = datasets.split(ds, 0.4, seed=6)
    assert not np.array_equal(a.valid_ids, c.valid_ids)


def test_split_rejects_bad_fraction():
    ds = datasets.generate("moons", 50, 0.2, seed=0)
    for frac in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(ValueError, match="valid_fraction"):
            datasets.split(ds, frac, seed=0)


def test_epoch_batches_cover_ids_exactly_once():
    ids = np.arange(100, 150)
    batches = datasets.epoch_batches(ids, 8, seed=0, epoch=3, tag="train")
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == ids.tolist()
    assert len(batches) == 7  # 6 full + remainder


def test_epoch_batches_deterministic_per_epoch_and_reshuffled():
    ids = np.arange(64)
    a = datasets.epoch_batches(ids, 16, seed=1, epoch=1, tag="t")
    b = datasets.epoch_batches(ids, 16, seed=1, epoch=1, tag="t")
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = datasets.epoch_batches(ids, 16, seed=1, epoch=2, tag="t")
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_csv_roundtrip(tmp_path):
    ds = datasets.generate("moons", 40, 0.2, seed=7)
    path = tmp_path / "ds.csv"
    datasets.to_csv(ds, path)
    back = datasets.from_csv(path)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    assert back.class_count == ds.class_count


def test_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("foo,bar\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        datasets.from_csv(path)

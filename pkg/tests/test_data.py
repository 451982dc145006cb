import gzip

import numpy as np
import pytest

from nbrflow.data import (Dataset, dataset_digest, generate, grid_centers, make_gaussian_grid, read_csv,
                          read_idx_images, read_idx_labels, split, write_csv, write_idx_images)


@pytest.mark.parametrize("kind", ["moons", "rings", "gaussian-grid", "pinwheel"])
def test_generators_deterministic(kind):
    a = generate(kind, 50, 0.1, np.random.default_rng(7))
    b = generate(kind, 50, 0.1, np.random.default_rng(7))
    assert a.digest() == b.digest() and a.x.shape == (50, 2) and a.labels is not None


def test_unknown_generator():
    with pytest.raises(ValueError):
        generate("spiral", 10, 0.1, np.random.default_rng(0))


def test_gaussian_grid_statistics():
    n, noise = 9000, 0.2
    ds = make_gaussian_grid(n, noise, np.random.default_rng(1))
    centers = grid_centers()
    for c in range(9):
        pts = ds.x[ds.labels == c]
        bound = 4 * noise / np.sqrt(len(pts))
        assert np.all(np.abs(pts.mean(axis=0) - centers[c]) < bound)


def test_csv_roundtrip(tmp_path):
    ds = generate("moons", 4, 0.1, np.random.default_rng(7))
    path = tmp_path / "d.csv"
    write_csv(path, ds)
    lines = path.read_text().splitlines()
    assert lines[0] == "x0,x1,label" and len(lines) == 5
    back = read_csv(path)
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert dataset_digest(back.x, back.labels) == ds.digest()


def test_csv_without_labels(tmp_path):
    path = tmp_path / "d.csv"
    write_csv(path, Dataset(np.zeros((0, 3))))
    assert path.read_text() == "x0,x1,x2\n"
    assert read_csv(path).x.shape == (0, 3)


def test_idx_images(tmp_path):
    imgs = np.arange(4 * 4 * 4, dtype=np.uint8).reshape(4, 4, 4) * 4
    path = tmp_path / "imgs.idx"
    write_idx_images(path, imgs)
    assert path.read_bytes()[:4] == b"\x00\x00\x08\x03"
    rows = read_idx_images(path)
    assert rows.shape == (4, 16) and rows.min() >= 0.0 and rows.max() <= 1.0
    small = read_idx_images(path, downsample=2)
    assert small.shape == (4, 4)
    assert small[0, 0] == pytest.approx(imgs[0, :2, :2].mean() / 255.0)
    gz = tmp_path / "imgs.idx.gz"
    gz.write_bytes(gzip.compress(path.read_bytes()))
    np.testing.assert_array_equal(read_idx_images(gz), rows)


def test_idx_labels(tmp_path):
    path = tmp_path / "labels.idx"
    path.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x03" + bytes([1, 7, 0]))
    assert read_idx_labels(path).tolist() == [1, 7, 0]


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(b"\x00\x00\x08\x01" + bytes(12))
    with pytest.raises(ValueError):
        read_idx_images(path)


def test_split_disjoint():
    ds = generate("rings", 100, 0.05, np.random.default_rng(0))
    parts = split(ds, [0.7, 0.15, 0.15], np.random.default_rng(1))
    assert [len(p) for p in parts] == [70, 15, 15]
    rows = {tuple(r) for p in parts for r in p.x}
    assert len(rows) == 100

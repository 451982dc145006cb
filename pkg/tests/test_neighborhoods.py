import numpy as np
import pytest
from scipy.stats import chisquare, ortho_group

from nbrflow.data import dataset_digest
from nbrflow.errors import (CorruptPayload, DegenerateData, DigestMismatch, EmptyTable,
                            InsufficientClassMembers, KTooLarge)
from nbrflow.neighborhoods import (Neighborhood, NeighborhoodTable, build_table, cluster_neighborhoods,
                                   fit_pca, kmeans, knn_query, load_table, sample_neighborhood,
                                   table_from_bytes)


def line_data(values):
    return np.column_stack([values, np.zeros(len(values))]).astype(float)


# PCA

def test_pca_single_direction():
    data = line_data([0.0, 1.0, 2.0, 5.0])
    proj = fit_pca(data)
    assert proj.p == 1 and proj.explained_fraction == pytest.approx(1.0)


def test_pca_isotropic_keeps_all(rng):
    data = rng.normal(size=(2000, 3))
    proj = fit_pca(data, 0.99)
    assert proj.p == 3
    cov = np.cov(data.T, bias=True)
    ev = np.sort(np.linalg.eigvalsh(cov))[::-1]
    assert proj.explained_fraction == pytest.approx(ev.sum() / ev.sum())


def test_pca_reconstruction_error_is_discarded_spectrum(rng):
    data = rng.normal(size=(300, 5)) @ np.diag([3.0, 2.0, 1.0, 0.3, 0.1])
    proj = fit_pca(data, 0.9)
    recon = proj.inverse_transform(proj.transform(data))
    err = np.mean(np.sum((data - recon) ** 2, axis=1))
    assert abs(err - proj.eigenvalues[proj.p:].sum()) < 1e-8
    assert proj.explained_fraction >= 0.9
    np.testing.assert_allclose(proj.components @ proj.components.T, np.eye(proj.p), atol=1e-8)


def test_pca_degenerate():
    with pytest.raises(DegenerateData):
        fit_pca(np.ones((5, 2)))


# kNN

def test_knn_forced_ordering():
    data = line_data([0.0, 1.0, 2.0, 10.0])
    nb = knn_query(data, fit_pca(data), 0, 2)
    assert set(nb.member_indices) == {1, 2}


def test_knn_class_restriction():
    data = line_data([0.0, 100.0, 0.1, 0.2])
    nb = knn_query(data, fit_pca(data), 0, 1, labels=np.array(["a", "a", "b", "b"]))
    assert nb.member_indices == (1,)


def test_knn_errors():
    data = line_data([0.0, 1.0, 2.0])
    with pytest.raises(KTooLarge):
        knn_query(data, fit_pca(data), 0, 3)
    with pytest.raises(InsufficientClassMembers):
        knn_query(data, fit_pca(data), 0, 1, labels=[0, 1, 1])


def test_knn_ties_go_to_smaller_index():
    data = line_data([0.0, -1.0, 1.0, 5.0])
    assert knn_query(data, fit_pca(data), 0, 1).member_indices == (1,)


def brute_force(data, k):
    d2 = np.sum((data[:, None] - data[None]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def test_table_matches_brute_force(rng):
    data = rng.normal(size=(200, 5))
    proj = fit_pca(data, 1.0)
    table = build_table(data, proj, 5)
    np.testing.assert_array_equal(table.index_array(), brute_force(proj.transform(data), 5))
    assert len(table) == 200
    assert all(i not in e.member_indices for i, e in enumerate(table.entries))
    np.testing.assert_array_equal(table.index_array()[17], knn_query(data, proj, 17, 5).member_indices)


def test_collinear_table():
    data = line_data([0.0, 1.0, 3.0])
    table = build_table(data, fit_pca(data), 1)
    assert table.entries[1].member_indices == (0,)


def test_include_self_flag(rng):
    data = rng.normal(size=(30, 2))
    table = build_table(data, fit_pca(data), 3, include_self=True)
    assert all(e.member_indices[0] == i for i, e in enumerate(table.entries))


def test_knn_invariant_under_rotation(rng):
    data = rng.normal(size=(80, 4))
    rot = ortho_group.rvs(4, random_state=3)
    a = build_table(data, fit_pca(data, 1.0), 4).index_array()
    moved = data @ rot.T + 7.0
    b = build_table(moved, fit_pca(moved, 1.0), 4).index_array()
    np.testing.assert_array_equal(a, b)


def test_neighborhood_immutable():
    nb = Neighborhood.from_indices(np.eye(3), [0, 2])
    with pytest.raises(ValueError):
        nb.member_vectors[0, 0] = 5.0
    with pytest.raises(ValueError):
        Neighborhood((1, 1), np.zeros((2, 2)))


# clustering

def test_singleton_clusters(rng):
    data = rng.normal(size=(12, 2))
    table = cluster_neighborhoods(data, fit_pca(data), 12, 1, rng)
    for c, e in enumerate(table.entries):
        assert table.assignments[e.member_indices[0]] == c
    assert sorted(i for e in table.entries for i in e.member_indices) == list(range(12))


def test_kmeans_objective_non_increasing(rng):
    x = rng.normal(size=(500, 3))
    res = kmeans(x, 8, rng)
    assert all(b <= a + 1e-9 for a, b in zip(res.objective_trace, res.objective_trace[1:]))


def test_two_blobs_recovered(rng):
    a = rng.normal(size=(100, 2)) * 0.3
    b = rng.normal(size=(100, 2)) * 0.3 + [8.0, 0.0]
    data = np.vstack([a, b])
    truth = np.r_[np.zeros(100), np.ones(100)]
    table = cluster_neighborhoods(data, fit_pca(data), 2, 3, rng)
    assign = table.assignments
    assert np.array_equal(assign, truth) or np.array_equal(assign, 1 - truth)
    assert len(table) == 2 and table.k == 3
    # prototypes sit in their own cluster
    for c, e in enumerate(table.entries):
        assert np.all(assign[list(e.member_indices)] == c)


def test_empty_cluster_reseeded():
    # duplicated points make k-means++ pick identical centres
    x = np.vstack([np.zeros((10, 2)), np.ones((1, 2)) * 5])
    res = kmeans(x, 3, np.random.default_rng(0))
    assert np.all(np.isfinite(res.centroids))


# sampling

def test_sample_single_entry():
    data = line_data([0.0, 1.0])
    table = build_table(data, fit_pca(data), 1)
    table.entries = table.entries[:1]
    assert sample_neighborhood(table, np.random.default_rng(0)) is table.entries[0]


def test_sample_uniform():
    data = line_data([0.0, 1.0, 2.0, 3.0])
    table = build_table(data, fit_pca(data), 1)
    rng = np.random.default_rng(5)
    draws = [table.entries.index(sample_neighborhood(table, rng)) for _ in range(40000)]
    freq = np.bincount(draws, minlength=4) / 40000
    assert np.all(np.abs(freq - 0.25) < 0.01)
    assert chisquare(np.bincount(draws)).pvalue > 1e-4


def test_sample_reproducible(moons_table):
    a = [sample_neighborhood(moons_table, np.random.default_rng(9)).member_indices for _ in range(3)]
    b = [sample_neighborhood(moons_table, np.random.default_rng(9)).member_indices for _ in range(3)]
    assert a == b


def test_empty_table():
    data = line_data([0.0, 1.0])
    table = NeighborhoodTable("knn", 1, [], data, fit_pca(data))
    with pytest.raises(EmptyTable):
        sample_neighborhood(table, np.random.default_rng(0))


# persistence

def test_table_roundtrip(tmp_path, rng):
    data = rng.normal(size=(50, 3))
    table = build_table(data, fit_pca(data), 4)
    path = tmp_path / "t.bin"
    table.save(path)
    again = load_table(path, data)
    np.testing.assert_array_equal(again.index_array(), table.index_array())
    assert again.digest() == table.digest()
    header = path.read_bytes().split(b"\n", 1)[0]
    assert b'"dataset_digest"' in header and b'"mode": "knn"' in header


def test_cluster_table_roundtrip(rng):
    data = rng.normal(size=(60, 2))
    table = cluster_neighborhoods(data, fit_pca(data), 4, 2, rng)
    again = table_from_bytes(table.to_bytes(), data)
    np.testing.assert_array_equal(again.assignments, table.assignments)
    assert again.query(data[:3])[0] is again.entries[again.assignments[0]]


def test_table_digest_checked(rng):
    data = rng.normal(size=(20, 2))
    raw = build_table(data, fit_pca(data), 2).to_bytes()
    with pytest.raises(DigestMismatch):
        table_from_bytes(raw, data + 1e-9)
    with pytest.raises(CorruptPayload):
        table_from_bytes(raw[:-3], data)


def test_class_restricted_table_digest_uses_labels(rng):
    data = rng.normal(size=(20, 2))
    labels = np.repeat([0, 1], 10)
    table = build_table(data, fit_pca(data), 2, labels=labels)
    assert table.dataset_digest == dataset_digest(data, labels)
    assert len(table_from_bytes(table.to_bytes(), data, labels)) == 20
    for i, e in enumerate(table.entries):
        assert np.all(labels[list(e.member_indices)] == labels[i])


def test_table_unchanged_by_training(moons_table, trained_nct):
    before = moons_table.digest()
    assert trained_nct[0].table is moons_table
    assert moons_table.digest() == before

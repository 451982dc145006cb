import math

import numpy as np
import pytest
from scipy.stats import norm

from nbrflow.errors import EmptyData, MissingTable, VariantMismatch
from nbrflow.estimators import (Estimator, KdeConfig, build_estimator, conditional_log_likelihood,
                                conditional_sample, kde_log_density, kde_sample, log_mean_exp,
                                marginal_log_likelihood, marginal_log_likelihoods, scott_bandwidth,
                                unconditional_sample)
from nbrflow.conditioning import ncl_log_likelihood, nct_log_likelihood
from nbrflow.flows import FlowModel
from nbrflow.neighborhoods import build_table, cluster_neighborhoods, fit_pca


# KDE

def test_kde_examples():
    assert kde_log_density(KdeConfig(1.0, [[0.0]]), [0.0]) == pytest.approx(-0.918939, abs=1e-6)
    assert kde_log_density(KdeConfig(1.0, [[-1.0], [1.0]]), [0.0]) == pytest.approx(-1.418939, abs=1e-6)


def test_kde_matches_direct_sum(rng):
    data = rng.normal(size=(100, 3))
    cfg = KdeConfig(0.7, data)
    q = rng.normal(size=(100, 3))
    direct = np.log(np.mean(np.prod(norm.pdf(q[:, None, :], data[None], 0.7), axis=-1), axis=1))
    assert np.max(np.abs(kde_log_density(cfg, q) - direct)) < 1e-10


def test_kde_far_query_no_underflow():
    assert np.isfinite(kde_log_density(KdeConfig(0.01, [[0.0, 0.0]]), [100.0, 100.0]))


def test_kde_sample_small_bandwidth(rng):
    data = rng.normal(size=(20, 2))
    s = kde_sample(KdeConfig(1e-12, data), rng)
    assert np.min(np.max(np.abs(data - s), axis=1)) < 1e-9


def test_kde_sample_mean(rng):
    cfg = KdeConfig(0.5, [[-1.0, 0.0], [1.0, 0.0]])
    s = kde_sample(cfg, rng, 50000)
    assert np.all(np.abs(s.mean(axis=0)) < 3 * math.sqrt(1.0 + 0.25) / math.sqrt(50000))
    a = kde_sample(cfg, np.random.default_rng(1), 5)
    np.testing.assert_array_equal(a, kde_sample(cfg, np.random.default_rng(1), 5))


def test_kde_errors():
    with pytest.raises(EmptyData):
        kde_log_density(KdeConfig(1.0, np.zeros((0, 2))), [0.0, 0.0])
    with pytest.raises(ValueError):
        KdeConfig(0.0, [[0.0]])


def test_scott_bandwidth(rng):
    data = rng.normal(size=(1000, 2))
    assert scott_bandwidth(data) == pytest.approx(1000 ** (-1 / 6) * data.std(axis=0, ddof=1).mean())


# facade

def test_variant_requirements(moons_table):
    with pytest.raises(VariantMismatch):
        Estimator("gan")
    with pytest.raises(VariantMismatch):
        Estimator("ncl", FlowModel([], 2))
    with pytest.raises(MissingTable):
        build_estimator("nct", 2)
    rnvp = build_estimator("rnvp", 2)
    with pytest.raises(VariantMismatch):
        conditional_log_likelihood(rnvp, [0.0, 0.0], moons_table.entries[0])
    with pytest.raises(VariantMismatch):
        marginal_log_likelihood(rnvp, [0.0, 0.0])


def test_facade_matches_module_calls(trained_ncl, trained_nct):
    ncl, nct = trained_ncl[0], trained_nct[0]
    x = np.array([0.2, -0.1])
    e = ncl.table.entries[5]
    assert conditional_log_likelihood(ncl, x, e) == ncl_log_likelihood(ncl.flow, ncl.head, x, e)
    assert conditional_log_likelihood(nct, x, e) == nct_log_likelihood(nct.flow, x, e)


def test_conditional_finite_on_test_split(trained_nct, moons_splits):
    est = trained_nct[0]
    test = moons_splits[2].x
    ll = est.log_prob(test, est.query_condition(test)).data
    assert np.all(np.isfinite(ll))


def test_identity_ncl_case():
    from test_conditioning import CopyHead, gaussian_kernel
    data = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    table = build_table(data, fit_pca(data), 1)
    est = Estimator("ncl", FlowModel([], 2), CopyHead(2, 1, 0.5), table)
    x = np.array([0.4, 0.2])
    assert conditional_log_likelihood(est, x, table.entries[0]) == pytest.approx(
        gaussian_kernel(x, data[1], 0.5), abs=1e-12)


# marginal likelihood

def small_table(rng, n_clusters):
    data = rng.normal(size=(40, 2))
    return cluster_neighborhoods(data, fit_pca(data), n_clusters, 2, rng)


def test_marginal_single_entry_equals_conditional(rng):
    table = small_table(rng, 1)
    est = build_estimator("ncl", 2, table, hidden=8, rng=rng)
    x = np.array([0.5, 0.5])
    m = marginal_log_likelihood(est, x, 100, rng)
    assert m == pytest.approx(conditional_log_likelihood(est, x, table.entries[0]), abs=1e-12)


def test_marginal_exact_enumeration(rng):
    from conftest import randomize
    table = small_table(rng, 10)
    est = build_estimator("nct", 2, table, hidden=8, rng=rng)
    randomize(est.flow, rng, 0.3)
    x = np.array([0.1, -0.3])
    each = [conditional_log_likelihood(est, x, e) for e in table.entries]
    brute = math.log(sum(math.exp(v) for v in each) / len(each))
    assert abs(marginal_log_likelihood(est, x, 10, rng) - brute) < 1e-12


def test_log_mean_exp_stable():
    assert log_mean_exp([1e6, 1e6]) == pytest.approx(1e6)
    assert log_mean_exp([-1e6, -1e6 + math.log(3.0)]) == pytest.approx(-1e6 + math.log(2.0))


def test_marginal_variance_shrinks_with_m(trained_nct):
    est = trained_nct[0]
    x = np.array([0.5, 0.25])
    var = {}
    for m in (10, 40):
        rng = np.random.default_rng(m)
        vals = [math.exp(marginal_log_likelihoods(est, x[None], m, rng)[0]) for _ in range(200)]
        var[m] = np.var(vals)
    ratio = var[10] / var[40]
    assert 2.0 <= ratio <= 8.0


# sampling

def test_ncl_sampling_collapses_to_mean(rng):
    from test_conditioning import CopyHead
    data = np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 0.0]])
    table = build_table(data, fit_pca(data), 1)
    est = Estimator("ncl", FlowModel([], 2), CopyHead(2, 1, 1e-4), table)
    s = conditional_sample(est, table.entries[0], rng, 20)
    assert np.max(np.abs(s - data[1])) < 1e-3


def test_conditional_sample_self_consistency(trained_nct):
    est = trained_nct[0]
    e = est.table.entries[11]
    s = conditional_sample(est, e, np.random.default_rng(0), 1000)
    ll = est.log_prob(s, np.repeat(e.member_vectors[None], 1000, axis=0)).data
    assert np.all(np.isfinite(ll))
    # mean of -ll estimates the entropy; its standard error bounds the gap
    ent = -ll.mean()
    s2 = conditional_sample(est, e, np.random.default_rng(1), 1000)
    ll2 = est.log_prob(s2, np.repeat(e.member_vectors[None], 1000, axis=0)).data
    se = math.sqrt(ll.var() / 1000 + ll2.var() / 1000)
    assert abs(ent - (-ll2.mean())) < 3 * se


def test_sampling_deterministic(trained_ncl):
    est = trained_ncl[0]
    e = est.table.entries[2]
    a = conditional_sample(est, e, np.random.default_rng(4), 5)
    np.testing.assert_array_equal(a, conditional_sample(est, e, np.random.default_rng(4), 5))
    u = unconditional_sample(est, np.random.default_rng(4), 5)
    np.testing.assert_array_equal(u, unconditional_sample(est, np.random.default_rng(4), 5))


def test_single_entry_unconditional_matches_conditional(rng):
    table = small_table(rng, 1)
    est = build_estimator("ncl", 2, table, hidden=8, rng=rng)
    big_a = unconditional_sample(est, np.random.default_rng(5), 4000)
    big_b = conditional_sample(est, table.entries[0], np.random.default_rng(6), 4000)
    assert np.all(np.abs(big_a.mean(0) - big_b.mean(0)) < 0.1)


def test_unconditional_containment(trained_nct, moons_splits):
    est = trained_nct[0]
    train = moons_splits[0].x
    lo, hi = train.min(0), train.max(0)
    pad = 0.1 * (hi - lo)
    s = unconditional_sample(est, np.random.default_rng(0), 5000)
    inside = np.all((s >= lo - pad) & (s <= hi + pad), axis=1)
    assert inside.mean() > 0.95


def test_other_variants_sample(trained_rnvp, rng):
    s = unconditional_sample(trained_rnvp[0], rng, 10)
    assert s.shape == (10, 2) and np.all(np.isfinite(s))
    kde = build_estimator("kde", 2, kde=KdeConfig(0.2, rng.normal(size=(5, 2))))
    assert unconditional_sample(kde, rng, 3).shape == (3, 2)
    cc = build_estimator("cc", 2, n_classes=2, rng=rng)
    assert conditional_sample(cc, 1, rng, 4).shape == (4, 2)
    assert np.isfinite(conditional_log_likelihood(cc, [0.0, 0.0], 1))

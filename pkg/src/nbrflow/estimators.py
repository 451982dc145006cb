"""Density estimators behind one interface: KDE, RealNVP, class-conditioned,
and the two neighbour-conditioned flows.

A conditional density p(x | N) is evaluated by :func:`conditional_log_likelihood`;
the generative density averages it over neighbourhoods drawn uniformly from
the table (:func:`marginal_log_likelihood`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tensor
from .conditioning import ClassHead, NclHead, encode_batch, ncl_log_prob, nct_log_prob
from .errors import EmptyData, MissingLabels, MissingTable, VariantMismatch
from .flows import FlowModel, build_flow, diag_normal_logpdf, log_likelihood
from .neighborhoods import Neighborhood, NeighborhoodTable, sample_entry_indices

VARIANTS = ("kde", "rnvp", "ncl", "nct", "cc")
DEFAULT_MARGINAL_M = 100


@dataclass
class KdeConfig:
    bandwidth: float
    data: np.ndarray

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def scott_bandwidth(data) -> float:
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, d = data.shape
    std = float(np.mean(data.std(axis=0, ddof=1))) if n > 1 else 1.0
    return n ** (-1.0 / (d + 4)) * (std if std > 0 else 1.0)


def kde_log_density(cfg: KdeConfig, x) -> np.ndarray:
    """log[(1/N) sum_i N(x | x_i, sigma^2 I)] via log-sum-exp; scalar for a vector query."""
    data = cfg.data
    if data.size == 0 or len(data) == 0:
        raise EmptyData("KDE needs at least one data point")
    q = np.asarray(x, dtype=np.float64)
    vector = q.ndim == 1
    q = np.atleast_2d(q)
    n, d = data.shape
    s2 = cfg.bandwidth ** 2
    const = -0.5 * d * math.log(2.0 * math.pi * s2) - math.log(n)
    out = np.empty(len(q))
    step = max(1, 4_000_000 // max(1, n * d))
    for a in range(0, len(q), step):
        diff = q[a:a + step, None, :] - data[None, :, :]
        sq = np.einsum("qnd,qnd->qn", diff, diff)
        out[a:a + step] = logsumexp(-0.5 * sq / s2, axis=1) + const
    return out[0] if vector else out


def kde_sample(cfg: KdeConfig, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    if len(cfg.data) == 0:
        raise EmptyData("KDE needs at least one data point")
    m = 1 if n is None else n
    idx = rng.integers(len(cfg.data), size=m)
    out = cfg.data[idx] + cfg.bandwidth * rng.normal(size=(m, cfg.data.shape[1]))
    return out[0] if n is None else out


@dataclass
class Estimator:
    """One model variant plus the handles it needs."""

    variant: str
    flow: Optional[FlowModel] = None
    head: Optional[object] = None
    table: Optional[NeighborhoodTable] = None
    kde: Optional[KdeConfig] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VariantMismatch(f"unknown variant {self.variant!r}")
        if self.variant == "kde" and self.kde is None:
            raise VariantMismatch("kde variant needs a KdeConfig")
        if self.variant in ("rnvp", "ncl", "nct", "cc") and self.flow is None:
            raise VariantMismatch(f"{self.variant} needs a flow")
        if self.variant == "ncl" and not isinstance(self.head, NclHead):
            raise VariantMismatch("ncl needs an NclHead")
        if self.variant == "cc" and not isinstance(self.head, ClassHead):
            raise VariantMismatch("cc needs a ClassHead")
        if self.variant == "nct" and not self.flow.conditioned:
            raise VariantMismatch("nct needs conditioned couplings")

    @property
    def conditional(self) -> bool:
        return self.variant in ("ncl", "nct")

    @property
    def d(self) -> int:
        return self.flow.input_dim if self.flow is not None else self.kde.data.shape[1]

    def parameters(self) -> list:
        params = [] if self.flow is None else self.flow.parameters()
        if self.head is not None:
            params += self.head.parameters()
        return params

    def named_parameters(self) -> list:
        out = [] if self.flow is None else [("flow." + n, p) for n, p in self.flow.named_parameters()]
        if self.head is not None:
            out += [("head." + n, p) for n, p in self.head.named_parameters()]
        return out

    def describe(self) -> dict:
        return {"variant": self.variant,
                "flow": None if self.flow is None else self.flow.describe(),
                "head": None if self.head is None else self.head.describe(),
                "norm_initialized": [] if self.flow is None
                else [n.initialized for n in self.flow.norms()]}

    def log_prob(self, x, cond=None) -> Tensor:
        """Row-wise log density of a batch; ``cond`` is (B, k, d) members or class ids."""
        x = ad.as_tensor(x)
        if self.variant == "kde":
            return Tensor(np.atleast_1d(kde_log_density(self.kde, x.data)))
        if self.variant == "rnvp":
            return log_likelihood(self.flow, x)
        if cond is None:
            raise VariantMismatch(f"{self.variant} needs conditioning")
        if self.variant == "ncl":
            return ncl_log_prob(self.flow, self.head, x, cond)
        if self.variant == "nct":
            return nct_log_prob(self.flow, x, cond)
        z, logdet = self.flow.forward(x)
        mu, sigma = self.head(cond)
        return diag_normal_logpdf(z, mu, sigma) + logdet

    def members_of_entries(self, entries) -> np.ndarray:
        idx = self.table.index_array()[np.asarray(entries, dtype=np.int64)]
        return self.table.data[idx]

    def train_condition(self, indices, labels=None):
        """Conditioning for training points (their fixed table neighbourhoods)."""
        if self.variant in ("ncl", "nct"):
            entries = [self.table.entry_index_of(i) for i in indices]
            return self.members_of_entries(entries)
        if self.variant == "cc":
            return np.asarray(labels)[np.asarray(indices)]
        return None

    def query_condition(self, x, labels=None):
        """Conditioning for new points, neighbours pulled from the training set."""
        if self.variant in ("ncl", "nct"):
            neighs = self.table.query(x, labels)
            return np.stack([n.member_vectors for n in neighs])
        if self.variant == "cc":
            return np.asarray(labels)
        return None


def _members(neigh) -> np.ndarray:
    if isinstance(neigh, Neighborhood):
        return np.asarray(neigh.member_vectors)
    return np.asarray(neigh, dtype=np.float64)


def conditional_log_likelihood(est: Estimator, x, neigh) -> float:
    """log p(x | N); for the cc variant ``neigh`` is a class id."""
    x = np.asarray(x, dtype=np.float64)[None]
    if est.variant == "ncl":
        return ncl_log_prob(est.flow, est.head, x, _members(neigh)[None]).data[0]
    if est.variant == "nct":
        return nct_log_prob(est.flow, x, _members(neigh)[None]).data[0]
    if est.variant == "cc":
        return est.log_prob(x, [int(neigh)]).data[0]
    raise VariantMismatch(f"{est.variant} has no conditional likelihood")


def conditional_log_likelihoods(est: Estimator, x, members) -> np.ndarray:
    """Batched conditional log-likelihoods, row i conditioned on members[i]."""
    return est.log_prob(np.asarray(x, dtype=np.float64), members).data


def log_mean_exp(values, axis=None):
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[axis] if axis is not None else values.size
    return logsumexp(values, axis=axis) - math.log(n)


def marginal_log_likelihood(est: Estimator, x, m: int = DEFAULT_MARGINAL_M,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Monte Carlo estimate of log (1/N) sum_j p(x | N_j) over ``m`` uniform draws.

    ``m`` equal to the table size enumerates every entry (exact marginal).
    """
    return float(marginal_log_likelihoods(est, np.asarray(x)[None], m, rng)[0])


def marginal_log_likelihoods(est: Estimator, xs, m: int = DEFAULT_MARGINAL_M,
                             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-point marginal estimates; neighbourhoods are redrawn for every point."""
    if not est.conditional:
        raise VariantMismatch("marginal likelihood needs a neighbour-conditioned model")
    if m < 1:
        raise ValueError("m must be at least 1")
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    n_entries = len(est.table)
    rng = rng if rng is not None else np.random.default_rng()
    out = np.empty(len(xs))
    for i, x in enumerate(xs):
        if m == n_entries:
            entries = np.arange(n_entries)
        else:
            entries = sample_entry_indices(est.table, m, rng)
        members = est.members_of_entries(entries)
        ll = conditional_log_likelihoods(est, np.repeat(x[None], len(entries), axis=0), members)
        out[i] = log_mean_exp(ll)
    return out


def conditional_samples(est: Estimator, members, rng: np.random.Generator) -> np.ndarray:
    """One sample per row of ``members`` (B, k, d) (class ids for cc)."""
    if est.variant == "ncl":
        members = np.asarray(members, dtype=np.float64)
        mu, sigma = est.head(encode_batch(est.flow, members))
        z = mu.data + sigma.data * rng.normal(size=mu.shape)
        return est.flow.inverse(z).data
    if est.variant == "nct":
        members = np.asarray(members, dtype=np.float64)
        cond = members.reshape(len(members), -1)
        z = rng.normal(size=(len(members), est.flow.input_dim))
        return est.flow.inverse(z, cond).data
    if est.variant == "cc":
        mu, sigma = est.head(members)
        z = mu.data + sigma.data * rng.normal(size=mu.shape)
        return est.flow.inverse(z).data
    raise VariantMismatch(f"{est.variant} has no conditional sampler")


def conditional_sample(est: Estimator, neigh, rng: np.random.Generator, n: Optional[int] = None):
    """Draw from p(. | N): latent Gaussian (NCL) or standard normal through q_N^-1 (NCT)."""
    if est.variant == "cc":
        cond = np.full(1 if n is None else n, int(neigh))
    else:
        m = _members(neigh)
        cond = np.repeat(m[None], 1 if n is None else n, axis=0)
    out = conditional_samples(est, cond, rng)
    return out[0] if n is None else out


def unconditional_sample(est: Estimator, rng: np.random.Generator, n: Optional[int] = None):
    """Full generative process: uniform neighbourhood, then a conditional draw."""
    m = 1 if n is None else n
    if est.variant == "kde":
        out = kde_sample(est.kde, rng, m)
    elif est.variant == "rnvp":
        out = est.flow.inverse(rng.normal(size=(m, est.flow.input_dim))).data
    elif est.variant == "cc":
        out = conditional_samples(est, rng.integers(est.head.n_classes, size=m), rng)
    else:
        entries = sample_entry_indices(est.table, m, rng)
        out = conditional_samples(est, est.members_of_entries(entries), rng)
    return out[0] if n is None else out


def build_estimator(variant: str, d: int, table: Optional[NeighborhoodTable] = None,
                    n_couplings: int = 6, hidden: int = 64, depth: int = 2,
                    n_classes: Optional[int] = None, cond_layers=None,
                    transformed_cond: bool = False, kde: Optional[KdeConfig] = None,
                    rng: Optional[np.random.Generator] = None) -> Estimator:
    """Fresh estimator with the default architecture for ``variant``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if variant == "kde":
        return Estimator("kde", kde=kde)
    k = table.k if table is not None else 0
    if variant in ("ncl", "nct") and table is None:
        raise MissingTable(f"{variant} needs a neighbourhood table")
    cond_dim = k * d if variant == "nct" else 0
    flow = build_flow(d, n_couplings, hidden, depth, cond_dim=cond_dim, cond_layers=cond_layers,
                      transformed_cond=transformed_cond, rng=rng)
    head = None
    if variant == "ncl":
        flow.base = "ncl"
        head = NclHead(d, k, hidden, rng=rng)
    elif variant == "cc":
        if not n_classes:
            raise MissingLabels("cc needs the number of classes")
        flow.base = "cc"
        head = ClassHead(d, n_classes, rng=rng)
    return Estimator(variant, flow, head, table if variant in ("ncl", "nct") else None)

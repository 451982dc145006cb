"""Neighbour conditioning: latent Gaussian heads (NCL) and conditioned couplings (NCT).

Batched functions take neighbourhoods as a ``(B, k, d)`` array of member
vectors in fixed member order; the single-example wrappers take a
:class:`~nbrflow.neighborhoods.Neighborhood`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import MissingConditioning, ShapeMismatch
from .flows import FlowModel, diag_normal_logpdf, standard_normal_logpdf
from .neighborhoods import Neighborhood
from .nn import MLP, Linear, Module

SIGMA_FLOOR = 1e-4


class NclHead(Module):
    """Maps flattened latent neighbour codes to the mean and scale of a diagonal Gaussian.

    A three-layer trunk is shared by the two branches.  Branch outputs start at
    exactly zero, so an untrained head gives ``mu = 0`` and
    ``sigma = softplus(0) + 1e-4``.
    """

    def __init__(self, d: int, k: int, hidden: int = 64, branch_depth: int = 2,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self._d, self._k, self._hidden, self._branch_depth = d, k, hidden, branch_depth
        self.trunk = MLP(k * d, hidden, hidden, depth=2, rng=rng, zero_last=False,
                         final_activation=True)
        self.mu_branch = MLP(hidden, d, hidden, branch_depth, rng)
        self.sigma_branch = MLP(hidden, d, hidden, branch_depth, rng)

    @property
    def d(self) -> int:
        return self._d

    @property
    def k(self) -> int:
        return self._k

    def describe(self) -> dict:
        return {"kind": "ncl", "d": self._d, "k": self._k, "hidden": self._hidden,
                "branch_depth": self._branch_depth}

    def __call__(self, codes: Tensor):
        codes = as_tensor(codes)
        if codes.ndim != 2 or codes.shape[1] != self._k * self._d:
            raise ShapeMismatch(f"head expects (B, {self._k * self._d}) codes, got {codes.shape}")
        h = self.trunk(codes)
        mu = self.mu_branch(h)
        sigma = ad.softplus(self.sigma_branch(h)) + SIGMA_FLOOR
        return mu, sigma


class ClassHead(Module):
    """Class-conditioned latent Gaussian: one dense layer each for mean and scale."""

    def __init__(self, d: int, n_classes: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self._d, self._n_classes = d, n_classes
        self.mu_layer = Linear(n_classes, d, rng, zero=True)
        self.sigma_layer = Linear(n_classes, d, rng, zero=True)

    @property
    def n_classes(self) -> int:
        return self._n_classes

    def describe(self) -> dict:
        return {"kind": "cc", "d": self._d, "n_classes": self._n_classes}

    def __call__(self, class_ids):
        onehot = np.eye(self._n_classes)[np.asarray(class_ids, dtype=np.int64)]
        mu = self.mu_layer(Tensor(onehot))
        sigma = ad.softplus(self.sigma_layer(Tensor(onehot))) + SIGMA_FLOOR
        return mu, sigma


@dataclass(frozen=True)
class NeighborEncoding:
    codes: np.ndarray  # (k, d) latent codes in member order

    @property
    def flat(self) -> np.ndarray:
        return self.codes.reshape(-1)


def _members(neigh) -> np.ndarray:
    if isinstance(neigh, Neighborhood):
        return np.asarray(neigh.member_vectors)
    return np.asarray(neigh, dtype=np.float64)


def encode_batch(model: FlowModel, members) -> Tensor:
    """Latent codes of a (B, k, d) neighbour block, flattened to (B, k*d)."""
    members = np.asarray(members, dtype=np.float64)
    if members.ndim != 3 or members.shape[2] != model.input_dim:
        raise ShapeMismatch(f"neighbours must be (B, k, {model.input_dim}), got {members.shape}")
    b, k, d = members.shape
    z, _ = model.forward(members.reshape(b * k, d))
    return ad.reshape(z, (b, k * d))


def encode_neighbors(model: FlowModel, neigh) -> NeighborEncoding:
    m = _members(neigh)
    codes = encode_batch(model, m[None])
    return NeighborEncoding(codes.data.reshape(m.shape))


def ncl_params(head: NclHead, enc):
    """(mu, sigma) for one encoding (vectors) or a batch of flattened codes (matrices)."""
    if isinstance(enc, NeighborEncoding):
        mu, sigma = head(Tensor(enc.flat[None]))
        return mu.data[0], sigma.data[0]
    return head(enc)


def ncl_log_prob(model: FlowModel, head: NclHead, x, members) -> Tensor:
    """Row-wise log N(q(x) | mu, diag sigma^2) + log|det dq/dx|."""
    x = as_tensor(x)
    z, logdet = model.forward(x)
    mu, sigma = head(encode_batch(model, members))
    return diag_normal_logpdf(z, mu, sigma) + logdet


def ncl_log_prob_shift_scale(model: FlowModel, head: NclHead, x, members) -> Tensor:
    """Same density via the whitened code ``(q(x) - mu) / sigma`` under N(0, I)."""
    x = as_tensor(x)
    z, logdet = model.forward(x)
    mu, sigma = head(encode_batch(model, members))
    white = (z - mu) / sigma
    return standard_normal_logpdf(white) + logdet - ad.tsum(ad.log(sigma), axis=1)


def ncl_log_likelihood(model: FlowModel, head: NclHead, x, neigh) -> float:
    x = np.asarray(x, dtype=np.float64)[None]
    return ncl_log_prob(model, head, x, _members(neigh)[None]).data[0]


def nct_condition_vector(neigh) -> np.ndarray:
    """Raw member vectors concatenated in member order (length k*d)."""
    m = _members(neigh)
    if m.size == 0:
        raise ValueError("empty neighbourhood")
    return m.reshape(-1).copy()


def nct_log_prob(model: FlowModel, x, members) -> Tensor:
    if not model.conditioned:
        raise MissingConditioning("NCT needs a flow built with conditioned couplings")
    members = np.asarray(members, dtype=np.float64)
    cond = members.reshape(members.shape[0], -1)
    if cond.shape[1] != model.cond_dim:
        raise ShapeMismatch(f"conditioning length {cond.shape[1]} != {model.cond_dim}")
    z, logdet = model.forward(as_tensor(x), Tensor(cond))
    return standard_normal_logpdf(z) + logdet


def nct_log_likelihood(model: FlowModel, x, neigh) -> float:
    x = np.asarray(x, dtype=np.float64)[None]
    return nct_log_prob(model, x, _members(neigh)[None]).data[0]

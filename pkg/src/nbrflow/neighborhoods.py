"""Fixed neighbourhoods: PCA + exact kNN, or k-means clusters with prototypes.

Tables are built once and never modified; training and evaluation only read
them.  Distances are Euclidean on (unwhitened) PCA coefficients, ties go to the
smaller dataset index.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import dataset_digest
from .errors import (DegenerateData, DigestMismatch, EmptyTable, InsufficientClassMembers,
                     KTooLarge, CorruptPayload)

DEFAULT_VARIANCE = 0.99
DEFAULT_K = 5
TABLE_MAGIC = "nbrflow-table"
TABLE_VERSION = 1


@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray  # (p, d), orthonormal rows
    explained_fraction: float
    threshold: float = DEFAULT_VARIANCE
    eigenvalues: Optional[np.ndarray] = None  # full spectrum, descending

    @property
    def p(self) -> int:
        return self.components.shape[0]

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.components.T

    def inverse_transform(self, coords) -> np.ndarray:
        return np.asarray(coords) @ self.components + self.mean


def fit_pca(data, variance_threshold: float = DEFAULT_VARIANCE) -> PcaProjection:
    """Smallest projection whose components explain ``variance_threshold`` of the variance.

    Uses the 1/N covariance, so the mean squared reconstruction error equals
    the sum of the discarded eigenvalues.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateData("PCA needs at least 2 points")
    if not 0.0 < variance_threshold <= 1.0:
        raise ValueError("variance_threshold must be in (0, 1]")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0.0:
        raise DegenerateData("all points are identical")
    cum = np.cumsum(evals) / total
    p = int(np.searchsorted(cum, variance_threshold - 1e-12)) + 1
    p = min(p, len(evals))
    comps = evecs[:, :p].T.copy()
    # deterministic sign: largest-magnitude entry of each component positive
    flip = np.sign(comps[np.arange(p), np.argmax(np.abs(comps), axis=1)])
    comps *= flip[:, None]
    return PcaProjection(mean, comps, float(min(cum[p - 1], 1.0)), float(variance_threshold), evals)


@dataclass(frozen=True, eq=False)
class Neighborhood:
    member_indices: tuple
    member_vectors: np.ndarray
    source: str = "knn"

    def __post_init__(self):
        if len(self.member_indices) < 1:
            raise ValueError("a neighborhood needs at least one member")
        if len(set(self.member_indices)) != len(self.member_indices):
            raise ValueError("duplicate neighborhood members")
        vec = np.array(self.member_vectors, dtype=np.float64)
        vec.setflags(write=False)
        object.__setattr__(self, "member_vectors", vec)
        object.__setattr__(self, "member_indices", tuple(int(i) for i in self.member_indices))

    @property
    def k(self) -> int:
        return len(self.member_indices)

    @classmethod
    def from_indices(cls, data, indices, source: str = "knn") -> "Neighborhood":
        idx = [int(i) for i in indices]
        return cls(tuple(idx), np.asarray(data)[idx], source)


def _sorted_neighbors(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row, ties by index."""
    order = np.argsort(dist, axis=1, kind="stable")
    return order[:, :k]


def _sq_dists(coords: np.ndarray, queries: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - coords[None, :, :]
    return np.einsum("qnp,qnp->qn", diff, diff)


def _chunk_size(n: int, p: int) -> int:
    return max(1, int(2_000_000 // max(1, n * p)))


def _knn_rows(coords, queries, k, exclude=None, labels=None, query_labels=None):
    """kNN for a block of queries; ``exclude`` gives one index per query to drop."""
    n = len(coords)
    out = np.empty((len(queries), k), dtype=np.int64)
    step = _chunk_size(n, coords.shape[1])
    for s in range(0, len(queries), step):
        e = min(s + step, len(queries))
        dist = _sq_dists(coords, queries[s:e])
        if exclude is not None:
            ex = np.asarray(exclude[s:e])
            ok = ex >= 0
            dist[np.flatnonzero(ok), ex[ok]] = np.inf
        if labels is not None:
            dist[labels[None, :] != query_labels[s:e, None]] = np.inf
        nb = _sorted_neighbors(dist, k)
        if np.any(~np.isfinite(np.take_along_axis(dist, nb, axis=1))):
            raise InsufficientClassMembers(f"fewer than k={k} admissible neighbors")
        out[s:e] = nb
    return out


def _check_k(n, k, include_self, labels, query_labels=None):
    if k < 1:
        raise ValueError("k must be positive")
    limit = n if include_self else n - 1
    if k > limit:
        raise KTooLarge(f"k={k} but only {limit} candidate neighbors")
    if labels is not None:
        classes, counts = np.unique(labels, return_counts=True)
        avail = dict(zip(classes.tolist(), (counts - (0 if include_self else 1)).tolist()))
        needed = np.unique(labels if query_labels is None else query_labels)
        short = [c for c in needed.tolist() if avail.get(c, 0) < k]
        if short:
            raise InsufficientClassMembers(f"classes {short} have fewer than k={k} members")


def knn_query(data, proj: PcaProjection, query_index: int, k: int, labels=None,
              include_self: bool = False) -> Neighborhood:
    data = np.asarray(data, dtype=np.float64)
    labels = None if labels is None else np.asarray(labels)
    n = len(data)
    if not 0 <= query_index < n:
        raise IndexError(f"query index {query_index} out of range")
    _check_k(n, k, include_self, labels, None if labels is None else labels[[query_index]])
    coords = proj.transform(data)
    nb = _knn_rows(coords, coords[[query_index]], k,
                   exclude=None if include_self else [query_index],
                   labels=labels, query_labels=None if labels is None else labels[[query_index]])
    return Neighborhood.from_indices(data, nb[0], "knn")


def knn_search(data, proj: PcaProjection, queries, k: int, labels=None, query_labels=None) -> np.ndarray:
    """Neighbours of external query points (nothing excluded); returns (Q, k) indices."""
    data = np.asarray(data, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    _check_k(len(data), k, True, labels, query_labels)
    coords = proj.transform(data)
    q = proj.transform(queries)
    return _knn_rows(coords, q, k, labels=None if labels is None else np.asarray(labels),
                     query_labels=None if query_labels is None else np.asarray(query_labels))


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective_trace: list
    n_iter: int


def _kmeans_pp(x, c, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, c):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _assign(x, centroids):
    d2 = np.empty((len(x), len(centroids)))
    step = _chunk_size(len(centroids), x.shape[1])
    for s in range(0, len(x), step):
        d2[s:s + step] = _sq_dists(centroids, x[s:s + step])
    a = np.argmin(d2, axis=1)
    return a, d2[np.arange(len(x)), a]


def kmeans(x, n_clusters: int, rng: np.random.Generator, max_iter: int = 300,
           tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from a k-means++ start.

    An empty cluster is re-seeded at the point farthest from its centroid.
    ``objective_trace`` holds the within-cluster sum of squares after each
    assignment step.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= n_clusters <= len(x):
        raise ValueError("need 1 <= n_clusters <= N")
    centroids = _kmeans_pp(x, n_clusters, rng)
    trace = []
    assign, d2 = _assign(x, centroids)
    trace.append(float(d2.sum()))
    it = 0
    for it in range(1, max_iter + 1):
        new = centroids.copy()
        for c in range(n_clusters):
            members = assign == c
            if members.any():
                new[c] = x[members].mean(axis=0)
        counts = np.bincount(assign, minlength=n_clusters)
        for c in np.flatnonzero(counts == 0):
            far = int(np.argmax(d2))
            new[c] = x[far]
            d2[far] = 0.0
        shift = float(np.max(np.sqrt(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        assign, d2 = _assign(x, centroids)
        trace.append(float(d2.sum()))
        if shift < tol:
            break
    return KMeansResult(centroids, assign, trace, it)


@dataclass
class NeighborhoodTable:
    """One neighbourhood per training point (knn) or per cluster (cluster)."""

    mode: str
    k: int
    entries: list
    data: np.ndarray
    proj: PcaProjection
    labels: Optional[np.ndarray] = None
    assignments: Optional[np.ndarray] = None
    centroids: Optional[np.ndarray] = None
    include_self: bool = False
    class_restricted: bool = False
    dataset_digest: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def neighborhood_of(self, i: int) -> Neighborhood:
        """Neighbourhood used when training on point ``i``."""
        if self.mode == "cluster":
            return self.entries[int(self.assignments[i])]
        return self.entries[i]

    def entry_index_of(self, i: int) -> int:
        return int(self.assignments[i]) if self.mode == "cluster" else int(i)

    def query(self, x, labels=None) -> list:
        """Neighbourhoods for new points, drawn from the training data only."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.mode == "cluster":
            a, _ = _assign(self.proj.transform(x), self.centroids)
            return [self.entries[int(c)] for c in a]
        lab = self.labels if self.class_restricted else None
        qlab = None if lab is None else np.asarray(labels)
        idx = knn_search(self.data, self.proj, x, self.k, lab, qlab)
        return [Neighborhood.from_indices(self.data, row, "knn") for row in idx]

    def index_array(self) -> np.ndarray:
        return np.array([e.member_indices for e in self.entries], dtype=np.int64)

    # serialization

    def header(self) -> dict:
        h = {
            "format": TABLE_MAGIC, "version": TABLE_VERSION, "mode": self.mode, "k": self.k,
            "n_entries": len(self.entries), "n_points": int(len(self.data)),
            "pca": {"p": self.proj.p, "threshold": self.proj.threshold,
                    "explained_fraction": self.proj.explained_fraction,
                    "mean": self.proj.mean.tolist(), "components": self.proj.components.tolist()},
            "dataset_digest": self.dataset_digest, "include_self": self.include_self,
            "class_restricted": self.class_restricted,
        }
        if self.centroids is not None:
            h["centroids"] = self.centroids.tolist()
        return h

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(json.dumps(self.header(), sort_keys=True).encode("utf-8"))
        buf.write(b"\n")
        buf.write(self.index_array().astype("<i4").tobytes())
        if self.mode == "cluster":
            buf.write(np.asarray(self.assignments).astype("<i4").tobytes())
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


def load_table(path, data, labels=None) -> NeighborhoodTable:
    """Read a table file and bind it to ``data``; the dataset digest must match."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return table_from_bytes(raw, data, labels)


def table_from_bytes(raw: bytes, data, labels=None) -> NeighborhoodTable:
    nl = raw.find(b"\n")
    if nl < 0:
        raise CorruptPayload("missing table header")
    try:
        h = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"bad table header: {exc}") from None
    if h.get("format") != TABLE_MAGIC:
        raise CorruptPayload("not a neighborhood table")
    data = np.asarray(data, dtype=np.float64)
    digest = dataset_digest(data, labels if h["class_restricted"] else None)
    if digest != h["dataset_digest"]:
        raise DigestMismatch("table was built from a different dataset")
    n_e, k = h["n_entries"], h["k"]
    body = raw[nl + 1:]
    want = 4 * n_e * k + (4 * h["n_points"] if h["mode"] == "cluster" else 0)
    if len(body) != want:
        raise CorruptPayload("table payload has the wrong size")
    idx = np.frombuffer(body[:4 * n_e * k], dtype="<i4").reshape(n_e, k)
    assignments = None
    if h["mode"] == "cluster":
        assignments = np.frombuffer(body[4 * n_e * k:], dtype="<i4").astype(np.int64)
    pca = h["pca"]
    proj = PcaProjection(np.array(pca["mean"]), np.array(pca["components"]).reshape(pca["p"], -1),
                         pca["explained_fraction"], pca["threshold"])
    source = "cluster-prototype" if h["mode"] == "cluster" else "knn"
    entries = [Neighborhood.from_indices(data, row, source) for row in idx]
    return NeighborhoodTable(h["mode"], k, entries, data, proj,
                             None if labels is None else np.asarray(labels), assignments,
                             None if "centroids" not in h else np.array(h["centroids"]),
                             h["include_self"], h["class_restricted"], h["dataset_digest"])


def build_table(data, proj: PcaProjection, k: int = DEFAULT_K, labels=None,
                include_self: bool = False) -> NeighborhoodTable:
    """kNN neighbourhood for every training point, same-class when labels are given."""
    data = np.asarray(data, dtype=np.float64)
    lab = None if labels is None else np.asarray(labels)
    n = len(data)
    _check_k(n, k, include_self, lab)
    coords = proj.transform(data)
    exclude = None if include_self else np.arange(n)
    idx = _knn_rows(coords, coords, k, exclude=exclude, labels=lab, query_labels=lab)
    entries = [Neighborhood.from_indices(data, row, "knn") for row in idx]
    return NeighborhoodTable("knn", k, entries, data, proj, lab, include_self=include_self,
                             class_restricted=lab is not None,
                             dataset_digest=dataset_digest(data, lab))


def cluster_neighborhoods(data, proj: PcaProjection, n_clusters: int, n_prototypes: int,
                          rng: np.random.Generator, labels=None, max_iter: int = 300,
                          tol: float = 1e-6) -> NeighborhoodTable:
    """k-means in PCA space; each cluster's neighbourhood is its ``n_prototypes``
    training points closest to the centroid."""
    data = np.asarray(data, dtype=np.float64)
    if n_clusters > len(data):
        raise ValueError("n_clusters exceeds the number of points")
    if not 1 <= n_prototypes <= len(data):
        raise KTooLarge("n_prototypes must be between 1 and N")
    coords = proj.transform(data)
    km = kmeans(coords, n_clusters, rng, max_iter, tol)
    protos = _knn_rows(coords, km.centroids, n_prototypes)
    entries = [Neighborhood.from_indices(data, row, "cluster-prototype") for row in protos]
    return NeighborhoodTable("cluster", n_prototypes, entries, data, proj,
                             None if labels is None else np.asarray(labels),
                             assignments=km.assignments, centroids=km.centroids,
                             dataset_digest=dataset_digest(data),
                             meta={"objective_trace": km.objective_trace, "n_iter": km.n_iter})


def sample_neighborhood(table: NeighborhoodTable, rng: np.random.Generator) -> Neighborhood:
    if len(table) == 0:
        raise EmptyTable("cannot sample from an empty table")
    return table.entries[int(rng.integers(len(table)))]


def sample_entry_indices(table: NeighborhoodTable, m: int, rng: np.random.Generator) -> np.ndarray:
    if len(table) == 0:
        raise EmptyTable("cannot sample from an empty table")
    return rng.integers(len(table), size=m)

"""Evaluation: bits per dimension, AUC-ROC, MMD, novelty scores, interpolation."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import EmptySet, SingleClass, SizeMismatch
from .estimators import Estimator, conditional_samples
from .flows import PreprocessConfig
from .neighborhoods import Neighborhood

DEFAULT_NOVELTY_K = 5


@dataclass
class MetricReport:
    name: str
    value: float
    n: int
    config_digest: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.name} is not finite")
        if self.n <= 0:
            raise ValueError("metric needs n > 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def write_reports(path, reports) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def bits_per_dimension(log_lik_nats, d: int, preproc: Optional[PreprocessConfig] = None,
                       logdet_offset=0.0):
    """Negative log-likelihood per dimension in bits.

    With ``preproc`` the likelihood is taken to be in logit space: the
    preprocessing logdet is added back and ``log2(levels)`` accounts for the
    discrete pixel grid.
    """
    if d < 1:
        raise ValueError("d must be at least 1")
    ll = np.asarray(log_lik_nats, dtype=np.float64)
    if preproc is not None:
        return -(ll + logdet_offset) / (d * math.log(2.0)) + math.log2(preproc.levels)
    return -ll / (d * math.log(2.0))


def _binary_labels(labels) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.dtype.kind in "US":
        return lab == "pos"
    return lab.astype(bool)


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via mid-ranks."""
    s = np.asarray(scores, dtype=np.float64)
    pos = _binary_labels(labels)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both positive and negative examples")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(fpr, tpr) points for descending thresholds, tied scores grouped, from (0,0) to (1,1)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = _binary_labels(labels)
    n_pos, n_neg = pos.sum(), (~pos).sum()
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both positive and negative examples")
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(pos)[last]
    fp = np.cumsum(~pos)[last]
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


def novelty_scores(est: Estimator, test_x, labels=None) -> np.ndarray:
    """Conditional log-likelihood of each test point given neighbours from the training set.

    ``est.table`` must be built from the one-class training split only.  For
    unconditional variants the plain log-likelihood is returned.
    """
    x = np.atleast_2d(np.asarray(test_x, dtype=np.float64))
    cond = est.query_condition(x, labels)
    out = np.empty(len(x))
    for s in range(0, len(x), 1024):
        c = None if cond is None else cond[s:s + 1024]
        out[s:s + 1024] = est.log_prob(x[s:s + 1024], c).data
    return out


def median_bandwidth(a, b) -> float:
    z = np.vstack([np.atleast_2d(a), np.atleast_2d(b)])
    if len(z) > 2000:
        z = z[np.random.default_rng(0).choice(len(z), 2000, replace=False)]
    d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(len(z), 1)
    med = float(np.sqrt(np.median(d2[iu]))) if iu[0].size else 1.0
    return med if med > 0 else 1.0


def _rbf_mean(a, b, h):
    total = 0.0
    for s in range(0, len(a), 512):
        d2 = np.sum((a[s:s + 512, None, :] - b[None, :, :]) ** 2, axis=-1)
        total += np.exp(-d2 / (2.0 * h * h)).sum()
    return total / (len(a) * len(b))


def mmd(samples_a, samples_b, bandwidth: Optional[float] = None) -> float:
    """Biased RBF-kernel MMD^2; the median pairwise distance is the default bandwidth."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.size == 0 or b.size == 0 or len(a) == 0 or len(b) == 0:
        raise EmptySet("MMD needs two non-empty sample sets")
    h = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    val = _rbf_mean(a, a, h) + _rbf_mean(b, b, h) - 2.0 * _rbf_mean(a, b, h)
    return max(val, 0.0)


def _members(n) -> np.ndarray:
    return np.asarray(n.member_vectors if isinstance(n, Neighborhood) else n, dtype=np.float64)


def interpolation_sets(n_a, n_b) -> list:
    """k+1 conditioning sets: step t has the first t member slots of N_a taken from N_b."""
    a, b = _members(n_a), _members(n_b)
    if a.shape != b.shape:
        raise SizeMismatch(f"neighbourhood sizes differ: {a.shape[0]} vs {b.shape[0]}")
    k = len(a)
    sets = []
    for t in range(k + 1):
        s = a.copy()
        s[:t] = b[:t]
        sets.append(s)
    return sets


def interpolate_neighborhoods(est: Estimator, n_a, n_b, samples_per_step: int,
                              rng: np.random.Generator) -> list:
    """Conditional samples along the swap path from N_a to N_b; list of (set, samples)."""
    out = []
    for s in interpolation_sets(n_a, n_b):
        cond = np.repeat(s[None], samples_per_step, axis=0)
        out.append((s, conditional_samples(est, cond, rng)))
    return out

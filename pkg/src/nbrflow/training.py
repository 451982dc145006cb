"""Likelihood and contrastive training, early stopping, and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, backward
from .conditioning import ClassHead, NclHead
from .errors import (CorruptPayload, DigestMismatch, NonFiniteError, NonFiniteLoss,
                     VersionMismatch)
from .estimators import Estimator, conditional_samples
from .flows import flow_from_description
from .neighborhoods import NeighborhoodTable

log = logging.getLogger(__name__)

DEFAULT_MARGIN_BPD = 0.5
CKPT_MAGIC = b"NBRFLOW-CKPT\x00\x00\x00\x01"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    contrastive: bool = False
    margin_bpd: float = DEFAULT_MARGIN_BPD
    # -1 maximizes log-likelihood (loss = -l + hinge); +1 follows the printed objective literally
    likelihood_sign: float = -1.0
    model_negatives: bool = False
    early_stop_patience: int = 10
    seed: int = 0
    init_batch: int = 512

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.margin_bpd < 0:
            raise ValueError("margin_bpd must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


def margin_nats(margin_bpd: float, d: int) -> float:
    return margin_bpd * d * math.log(2.0)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> list:
        return self.m + self.v

    def load_state(self, arrays, t: int) -> None:
        n = len(self.params)
        self.m = [np.array(a) for a in arrays[:n]]
        self.v = [np.array(a) for a in arrays[n:2 * n]]
        self.t = t


class SGD:
    def __init__(self, params, lr=1e-3):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        for p, g in zip(self.params, grads):
            p.data = p.data - self.lr * g

    def state(self) -> list:
        return []

    def load_state(self, arrays, t: int) -> None:
        self.t = t


def make_optimizer(est: Estimator, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(est.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(est.parameters(), cfg.learning_rate)


# losses

def nll_loss(est: Estimator, x, cond) -> Tensor:
    return -ad.mean(est.log_prob(x, cond))


def contrastive_terms(est: Estimator, x, x_neg, cond, margin: float):
    """Per-row positive log-likelihood, negative log-likelihood and hinge."""
    lp = est.log_prob(x, cond)
    ln = est.log_prob(x_neg, cond)
    hinge = ad.relu((ln - lp) + margin)
    return lp, ln, hinge


def contrastive_loss(est: Estimator, x, x_neg, cond, margin: float, sign: float = -1.0) -> Tensor:
    """mean[ sign * l(x|N) + max(0, margin + l(x'|N) - l(x|N)) ]."""
    lp, _, hinge = contrastive_terms(est, x, x_neg, cond, margin)
    return ad.mean(lp * sign + hinge)


def _locate_nonfinite(est, x, cond, indices):
    for j in range(len(x)):
        c = None if cond is None else cond[j:j + 1]
        try:
            v = est.log_prob(x[j:j + 1], c).data[0]
        except (NonFiniteError, FloatingPointError):
            return int(indices[j])
        if not np.isfinite(v):
            return int(indices[j])
    return None


def _apply(est, optimizer, loss_builder, x, cond, indices):
    params = est.parameters()
    try:
        with Graph() as g:
            loss = loss_builder()
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError("loss")
    except (NonFiniteError, FloatingPointError) as exc:
        bad = _locate_nonfinite(est, x, cond, indices)
        raise NonFiniteLoss(f"non-finite loss ({exc}); offending index {bad}", bad) from None
    grads = backward(g, loss)
    optimizer.step([grads.of(p) for p in params])
    return value


def mle_step(est: Estimator, batch, data, optimizer, labels=None) -> float:
    """One update on -mean log p(x_i | N(x_i)); returns the pre-update loss."""
    batch = np.asarray(batch, dtype=np.int64)
    x = data[batch]
    cond = est.train_condition(batch, labels)
    return _apply(est, optimizer, lambda: nll_loss(est, x, cond), x, cond, batch)


def draw_negatives(est: Estimator, batch, data, rng: np.random.Generator,
                   model_negatives: bool = False) -> np.ndarray:
    """One negative per batch point, taken from a uniformly chosen other neighbourhood.

    Real training points are used unless ``model_negatives`` is set, in which
    case the negative is a model sample conditioned on that other neighbourhood.
    The negative is never a member of the positive's own neighbourhood.
    """
    table = est.table
    n_entries = len(table)
    idx_array = table.index_array()
    out_entries = np.empty(len(batch), dtype=np.int64)
    out_points = np.empty(len(batch), dtype=np.int64)
    for r, i in enumerate(batch):
        own = table.entry_index_of(int(i))
        own_members = set(idx_array[own].tolist()) | {int(i)}
        for _ in range(1000):
            e = int(rng.integers(n_entries - 1))
            e = e + 1 if e >= own else e
            cand = int(idx_array[e][rng.integers(idx_array.shape[1])])
            if cand not in own_members:
                break
        out_entries[r] = e
        out_points[r] = cand
    if model_negatives:
        return conditional_samples(est, est.members_of_entries(out_entries), rng)
    return data[out_points]


def contrastive_step(est: Estimator, batch, data, optimizer, cfg: TrainConfig,
                     rng: np.random.Generator, x_neg=None) -> float:
    """One update on the margin objective; returns the pre-update loss."""
    batch = np.asarray(batch, dtype=np.int64)
    x = data[batch]
    if x_neg is None:
        x_neg = draw_negatives(est, batch, data, rng, cfg.model_negatives)
    cond = est.train_condition(batch)
    margin = margin_nats(cfg.margin_bpd, est.d)
    return _apply(est, optimizer,
                  lambda: contrastive_loss(est, x, x_neg, cond, margin, cfg.likelihood_sign),
                  x, cond, batch)


# evaluation helpers

def mean_nll(est: Estimator, x, cond, batch: int = 1024) -> float:
    total = 0.0
    for s in range(0, len(x), batch):
        c = None if cond is None else cond[s:s + batch]
        total += -est.log_prob(x[s:s + batch], c).data.sum()
    return total / len(x)


def hinge_rate(est: Estimator, x, x_neg, cond, margin: float) -> float:
    lp = est.log_prob(x, cond).data
    ln = est.log_prob(x_neg, cond).data
    return float(np.mean(lp - ln >= margin))


def snapshot(est: Estimator) -> list:
    return [p.data.copy() for p in est.parameters()]


def restore(est: Estimator, values) -> None:
    for p, v in zip(est.parameters(), values):
        p.data = v.copy()


def data_init(est: Estimator, data, labels, rng: np.random.Generator, n: int = 512) -> None:
    if est.flow is None or all(nm.initialized for nm in est.flow.norms()):
        return
    pick = np.sort(rng.choice(len(data), size=min(n, len(data)), replace=False))
    cond = None
    if est.variant == "nct":
        cond = est.train_condition(pick).reshape(len(pick), -1)
    est.flow.data_init(data[pick], cond)


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid_nll: float = math.inf
    initial_valid_nll: float = math.inf

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def fit(est: Estimator, train, valid, cfg: TrainConfig, labels=None, valid_labels=None,
        callback=None):
    """Train with minibatches until ``epochs`` or early stopping.

    ``train``/``valid`` are (N, d) arrays; ``est.table`` must be built on
    ``train``.  Validation neighbourhoods are pulled from the training set and
    fixed up front.  The best-validation parameters are restored on exit.
    Returns ``(est, history)``.
    """
    rng = np.random.default_rng(cfg.seed)
    train = np.asarray(train, dtype=np.float64)
    valid = np.asarray(valid, dtype=np.float64)
    data_init(est, train, labels, rng, cfg.init_batch)
    optimizer = make_optimizer(est, cfg)
    valid_cond = est.query_condition(valid, valid_labels)
    margin = margin_nats(cfg.margin_bpd, est.d)
    hist = History()
    hist.initial_valid_nll = mean_nll(est, valid, valid_cond)
    best = snapshot(est)
    best_nll = hist.initial_valid_nll
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(len(train))
        losses, train_nlls = [], []
        neg_x, neg_i = [], []
        for s in range(0, len(train), cfg.batch_size):
            b = np.sort(perm[s:s + cfg.batch_size])
            if cfg.contrastive:
                x_neg = draw_negatives(est, b, train, rng, cfg.model_negatives)
                neg_x.append(x_neg)
                neg_i.append(b)
                losses.append(contrastive_step(est, b, train, optimizer, cfg, rng, x_neg))
            else:
                losses.append(mle_step(est, b, train, optimizer, labels))
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "train_nll": mean_nll(est, train, est.train_condition(np.arange(len(train)), labels)),
               "valid_nll": mean_nll(est, valid, valid_cond)}
        if cfg.contrastive:
            bi = np.concatenate(neg_i)
            rec["hinge_satisfied"] = hinge_rate(est, train[bi], np.concatenate(neg_x),
                                                est.train_condition(bi), margin)
        hist.epochs.append(rec)
        improved = rec["valid_nll"] < best_nll
        if improved:
            best_nll = rec["valid_nll"]
            best = snapshot(est)
            hist.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        if callback is not None:
            callback(rec)
        log.info("epoch %d train %.4f valid %.4f", epoch, rec["train_loss"], rec["valid_nll"])
        if cfg.early_stop_patience == 0 or stale >= cfg.early_stop_patience:
            break
    restore(est, best)
    hist.best_valid_nll = best_nll
    est.meta.update({"epoch": hist.best_epoch, "best_valid_nll": best_nll})
    est.meta["optimizer"] = optimizer
    return est, hist


# checkpoints: magic | u32 version | u32 header length | JSON header | f64 payload | u32 crc32

def checkpoint_bytes(est: Estimator, optimizer=None, epoch: int = 0,
                     best_valid_nll: Optional[float] = None, extra: Optional[dict] = None) -> bytes:
    named = est.named_parameters()
    opt_arrays = [] if optimizer is None else optimizer.state()
    header = {
        "architecture": est.describe(),
        "params": [[n, list(p.shape)] for n, p in named],
        "optimizer": None if optimizer is None else
        {"kind": type(optimizer).__name__.lower(), "t": optimizer.t, "n_arrays": len(opt_arrays)},
        "epoch": epoch,
        "best_valid_nll": best_valid_nll,
        "table_digest": None if est.table is None else est.table.digest(),
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                       for a in [p.data for _, p in named] + list(opt_arrays))
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(est: Estimator, path, optimizer=None, epoch: Optional[int] = None,
                    best_valid_nll: Optional[float] = None, extra: Optional[dict] = None) -> None:
    epoch = est.meta.get("epoch", 0) if epoch is None else epoch
    if best_valid_nll is None:
        best_valid_nll = est.meta.get("best_valid_nll")
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(est, optimizer, epoch, best_valid_nll, extra))


def parse_checkpoint(raw: bytes):
    """Validate framing and checksum; returns (header, list of parameter arrays, optimizer arrays)."""
    if len(raw) < len(CKPT_MAGIC) + 12 or raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptPayload("not an nbrflow checkpoint")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptPayload("checksum mismatch")
    off = len(CKPT_MAGIC)
    version, hlen = struct.unpack("<II", raw[off:off + 8])
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    off += 8
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    payload = np.frombuffer(raw[off:-4], dtype="<f8")
    arrays, pos = [], 0
    shapes = [tuple(s) for _, s in header["params"]]
    opt = header.get("optimizer")
    if opt and opt["n_arrays"]:
        shapes = shapes * 3  # params, then adam first and second moments
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        if pos + n > payload.size:
            raise CorruptPayload("payload shorter than the header describes")
        arrays.append(payload[pos:pos + n].reshape(shape).astype(np.float64))
        pos += n
    if pos != payload.size:
        raise CorruptPayload("payload longer than the header describes")
    n_params = len(header["params"])
    return header, arrays[:n_params], arrays[n_params:]


def estimator_from_description(arch: dict, table: Optional[NeighborhoodTable] = None) -> Estimator:
    flow = flow_from_description(arch["flow"])
    for norm, flag in zip(flow.norms(), arch.get("norm_initialized", [])):
        norm.initialized = flag
    head = None
    hd = arch.get("head")
    if hd is not None and hd["kind"] == "ncl":
        head = NclHead(hd["d"], hd["k"], hd["hidden"], hd["branch_depth"])
    elif hd is not None and hd["kind"] == "cc":
        head = ClassHead(hd["d"], hd["n_classes"])
    return Estimator(arch["variant"], flow, head, table)


def load_checkpoint(path, table: Optional[NeighborhoodTable] = None) -> Estimator:
    """Rebuild an estimator; ``table`` must be the one it was trained with (ncl/nct)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header, params, opt_arrays = parse_checkpoint(raw)
    want = header.get("table_digest")
    if table is not None and want is not None and table.digest() != want:
        raise DigestMismatch("neighborhood table changed since the checkpoint was written")
    est = estimator_from_description(header["architecture"], table)
    named = est.named_parameters()
    if [n for n, _ in named] != [n for n, _ in header["params"]]:
        raise CorruptPayload("parameter layout does not match the architecture")
    for (_, p), arr in zip(named, params):
        p.data = arr.copy()
    est.meta.update({"epoch": header["epoch"], "best_valid_nll": header["best_valid_nll"],
                     "table_digest": want, "extra": header.get("extra", {})})
    opt = header.get("optimizer")
    if opt:
        if opt["kind"] == "adam":
            o = Adam(est.parameters())
        else:
            o = SGD(est.parameters())
        o.load_state(opt_arrays, opt["t"])
        est.meta["optimizer"] = o
    return est

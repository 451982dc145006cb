"""Invertible layers, their log-determinants, and composed flows.

Every layer maps a batch ``(B, d)`` to ``(B, d)`` plus a per-row log-determinant
``(B,)``.  The functional wrappers at the bottom also accept single vectors.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import AlreadyInitialized, DegenerateData, DomainError, MissingConditioning, ShapeMismatch
from .nn import MLP, Module, param

LOG_2PI = math.log(2.0 * math.pi)
NORM_EPS = 1e-6


def alternating_mask(d: int, parity: int) -> np.ndarray:
    """Half-split mask: 1 marks the kept part A (even indices when parity is 0)."""
    mask = (np.arange(d) % 2 == parity).astype(np.int64)
    if d == 1:
        raise ShapeMismatch("coupling layers need d >= 2")
    return mask


class CouplingLayer(Module):
    """Affine coupling, optionally conditioned on an extra input vector.

    The kept half A passes through; the other half B becomes
    ``x_B * s + t`` with ``s = exp(clamp * tanh(raw))``.
    """

    kind = "coupling"

    def __init__(self, mask, hidden: int = 64, depth: int = 2, cond_dim: int = 0,
                 rng: Optional[np.random.Generator] = None):
        mask = np.asarray(mask, dtype=np.int64)
        if mask.ndim != 1 or mask.min() != 0 or mask.max() != 1 or not set(np.unique(mask)) <= {0, 1}:
            raise ShapeMismatch("mask must be a binary vector with both 0 and 1 entries")
        rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = mask
        self._idx_a = np.flatnonzero(mask == 1)
        self._idx_b = np.flatnonzero(mask == 0)
        self._unperm = np.argsort(np.concatenate([self._idx_a, self._idx_b]), kind="stable")
        self._cond_dim = int(cond_dim)
        self._hidden = hidden
        self._depth = depth
        n_in = len(self._idx_a) + self._cond_dim
        self.s_net = MLP(n_in, len(self._idx_b), hidden, depth, rng)
        self.t_net = MLP(n_in, len(self._idx_b), hidden, depth, rng)
        self.clamp = param(np.ones(len(self._idx_b)))

    @property
    def mask(self) -> np.ndarray:
        return self._mask

    @property
    def cond_dim(self) -> int:
        return self._cond_dim

    @property
    def dim(self) -> int:
        return len(self._mask)

    def describe(self) -> dict:
        return {"kind": self.kind, "mask": self._mask.tolist(), "hidden": self._hidden,
                "depth": self._depth, "cond_dim": self._cond_dim}

    def _check(self, x: Tensor, cond):
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeMismatch(f"coupling expects (B, {self.dim}), got {x.shape}")
        if self._cond_dim:
            if cond is None:
                raise MissingConditioning("this coupling layer was built with a conditioning input")
            cond = as_tensor(cond)
            if cond.ndim == 1:
                cond = ad.broadcast_to(cond, (x.shape[0], cond.shape[0]))
            if cond.shape != (x.shape[0], self._cond_dim):
                raise ShapeMismatch(f"conditioning must be (B, {self._cond_dim}), got {cond.shape}")
            return cond
        if cond is not None:
            raise ShapeMismatch("conditioning given to an unconditioned coupling layer")
        return None

    def scale_shift(self, xa: Tensor, cond: Optional[Tensor]):
        inp = xa if cond is None else ad.concat([xa, cond], axis=1)
        log_s = self.clamp * ad.tanh(self.s_net(inp))
        return log_s, self.t_net(inp)

    def forward(self, x, cond=None):
        x = as_tensor(x)
        cond = self._check(x, cond)
        xa = ad.take(x, self._idx_a, axis=1)
        xb = ad.take(x, self._idx_b, axis=1)
        log_s, t = self.scale_shift(xa, cond)
        yb = xb * ad.exp(log_s) + t
        y = ad.take(ad.concat([xa, yb], axis=1), self._unperm, axis=1)
        return y, ad.tsum(log_s, axis=1)

    def inverse(self, y, cond=None):
        y = as_tensor(y)
        cond = self._check(y, cond)
        ya = ad.take(y, self._idx_a, axis=1)
        yb = ad.take(y, self._idx_b, axis=1)
        log_s, t = self.scale_shift(ya, cond)
        xb = (yb - t) * ad.exp(-log_s)
        return ad.take(ad.concat([ya, xb], axis=1), self._unperm, axis=1)


class InvertibleNorm(Module):
    """Per-dimension affine ``y = x * exp(log_scale) + shift`` with data-dependent init."""

    kind = "norm"

    def __init__(self, d: int):
        self.log_scale = param(np.zeros(d))
        self.shift = param(np.zeros(d))
        self.initialized = False
        self._d = d

    @property
    def dim(self) -> int:
        return self._d

    def describe(self) -> dict:
        return {"kind": self.kind, "d": self._d}

    def initialize(self, batch) -> None:
        batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
        if self.initialized:
            raise AlreadyInitialized("InvertibleNorm already initialized")
        if batch.ndim != 2 or batch.shape[0] < 2:
            raise DegenerateData("initialization batch needs at least 2 rows")
        if batch.shape[1] != self._d:
            raise ShapeMismatch(f"expected {self._d} columns, got {batch.shape[1]}")
        mu = batch.mean(axis=0)
        var = batch.var(axis=0)
        flat = var <= 0
        if np.any(flat):
            warnings.warn(f"zero variance in dimensions {np.flatnonzero(flat).tolist()}; "
                          f"stabilizing with eps={NORM_EPS}", RuntimeWarning, stacklevel=2)
            var = np.where(flat, var + NORM_EPS, var)
        std = np.sqrt(var)
        self.log_scale.data = -np.log(std)
        self.shift.data = -mu / std
        self.initialized = True

    def forward(self, x, cond=None):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self._d:
            raise ShapeMismatch(f"norm expects (B, {self._d}), got {x.shape}")
        y = x * ad.exp(self.log_scale) + self.shift
        logdet = ad.broadcast_to(ad.tsum(self.log_scale), (x.shape[0],))
        return y, logdet

    def inverse(self, y, cond=None):
        y = as_tensor(y)
        return (y - self.shift) * ad.exp(-self.log_scale)


class ReversePermutation(Module):
    """Index reversal; volume preserving."""

    kind = "reverse"

    def __init__(self, d: int):
        self._d = d
        self._perm = np.arange(d)[::-1].copy()

    @property
    def dim(self) -> int:
        return self._d

    def describe(self) -> dict:
        return {"kind": self.kind, "d": self._d}

    def forward(self, x, cond=None):
        x = as_tensor(x)
        return ad.take(x, self._perm, axis=1), Tensor(np.zeros(x.shape[0]))

    def inverse(self, y, cond=None):
        return ad.take(as_tensor(y), self._perm, axis=1)


class FlowModel(Module):
    """Composition ``q = q_m o ... o q_1`` of invertible layers.

    ``cond`` is routed to the conditioned coupling layers only.  With
    ``transformed_cond`` the conditioning neighbours are pushed through the
    flow alongside the input, and each coupling sees the current neighbour
    states instead of the raw ones.
    """

    def __init__(self, layers: Sequence[Module], input_dim: int, base: str = "standard",
                 transformed_cond: bool = False):
        self.layers = list(layers)
        self._input_dim = int(input_dim)
        self.base = base
        self._transformed_cond = transformed_cond
        for layer in self.layers:
            if layer.dim != self._input_dim:
                raise ShapeMismatch("layer dimension does not match the flow input dimension")

    @property
    def input_dim(self) -> int:
        return self._input_dim

    @property
    def transformed_cond(self) -> bool:
        return self._transformed_cond

    @property
    def cond_dim(self) -> int:
        dims = {l.cond_dim for l in self.layers if isinstance(l, CouplingLayer) and l.cond_dim}
        return dims.pop() if dims else 0

    @property
    def conditioned(self) -> bool:
        return self.cond_dim > 0

    def norms(self) -> list[InvertibleNorm]:
        return [l for l in self.layers if isinstance(l, InvertibleNorm)]

    def describe(self) -> dict:
        return {"input_dim": self._input_dim, "base": self.base,
                "transformed_cond": self._transformed_cond,
                "layers": [l.describe() for l in self.layers]}

    def _layer_cond(self, layer, cond, states):
        if not (isinstance(layer, CouplingLayer) and layer.cond_dim):
            return None
        if cond is None:
            raise MissingConditioning("conditioned flow evaluated without conditioning")
        if states is not None:
            return ad.reshape(states, (cond.shape[0], -1))
        return cond

    def _neighbor_states(self, cond):
        """States of the conditioning neighbours before each layer (transformed mode)."""
        b = cond.shape[0]
        d = self._input_dim
        k = cond.shape[1] // d
        s = ad.reshape(cond, (b * k, d))
        states = []
        for layer in self.layers:
            states.append(s)
            lc = None
            if isinstance(layer, CouplingLayer) and layer.cond_dim:
                flat = ad.reshape(s, (b, k * d))
                lc = ad.reshape(ad.concat([flat] * k, axis=1), (b * k, k * d))
            s, _ = layer.forward(s, lc)
        return states

    def _prep(self, x, cond):
        x = as_tensor(x)
        vector = x.ndim == 1
        if vector:
            x = ad.reshape(x, (1, -1))
        if x.ndim != 2 or x.shape[1] != self._input_dim:
            raise ShapeMismatch(f"flow expects (B, {self._input_dim}), got {x.shape}")
        if cond is not None:
            cond = as_tensor(cond)
            if cond.ndim == 1:
                cond = ad.broadcast_to(cond, (x.shape[0], cond.shape[0]))
        return x, cond, vector

    def forward(self, x, cond=None):
        """Return ``(z, total_logdet)``; logdet per row (scalar for vector input)."""
        x, cond, vector = self._prep(x, cond)
        states = self._neighbor_states(cond) if (cond is not None and self._transformed_cond
                                                 and self.conditioned) else None
        total = Tensor(np.zeros(x.shape[0]))
        for i, layer in enumerate(self.layers):
            lc = self._layer_cond(layer, cond, None if states is None else states[i])
            x, ld = layer.forward(x, lc)
            total = total + ld
        if vector:
            return ad.reshape(x, (-1,)), ad.reshape(total, ())
        return x, total

    def inverse(self, z, cond=None):
        z, cond, vector = self._prep(z, cond)
        states = self._neighbor_states(cond) if (cond is not None and self._transformed_cond
                                                 and self.conditioned) else None
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            lc = self._layer_cond(layer, cond, None if states is None else states[i])
            z = layer.inverse(z, lc)
        return ad.reshape(z, (-1,)) if vector else z

    def data_init(self, batch, cond=None) -> None:
        """Initialize every uninitialized norm layer from a forward pass of ``batch``."""
        x, cond, _ = self._prep(np.asarray(batch, dtype=np.float64), cond)
        states = self._neighbor_states(cond) if (cond is not None and self._transformed_cond
                                                 and self.conditioned) else None
        for i, layer in enumerate(self.layers):
            if isinstance(layer, InvertibleNorm) and not layer.initialized:
                layer.initialize(x.data)
            lc = self._layer_cond(layer, cond, None if states is None else states[i])
            x, _ = layer.forward(x, lc)


def build_flow(d: int, n_couplings: int = 6, hidden: int = 64, depth: int = 2, cond_dim: int = 0,
               cond_layers: Optional[Sequence[int]] = None, norm: bool = True, permute: bool = True,
               transformed_cond: bool = False, rng: Optional[np.random.Generator] = None) -> FlowModel:
    """Default stack: coupling + norm, masks alternating, reversal after each coupling pair.

    ``cond_layers`` selects which couplings (by position) receive the
    conditioning vector; all of them when omitted.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    layers: list[Module] = []
    for i in range(n_couplings):
        cd = cond_dim if (cond_layers is None or i in cond_layers) else 0
        layers.append(CouplingLayer(alternating_mask(d, i % 2), hidden, depth, cd, rng))
        if norm:
            layers.append(InvertibleNorm(d))
        if permute and i % 2 == 1 and i < n_couplings - 1:
            layers.append(ReversePermutation(d))
    return FlowModel(layers, d, transformed_cond=transformed_cond)


def flow_from_description(desc: dict) -> FlowModel:
    layers = []
    d = desc["input_dim"]
    for layer_desc in desc["layers"]:
        if layer_desc["kind"] == "coupling":
            layers.append(CouplingLayer(layer_desc["mask"], layer_desc["hidden"], layer_desc["depth"],
                                        layer_desc["cond_dim"]))
        elif layer_desc["kind"] == "norm":
            layers.append(InvertibleNorm(layer_desc["d"]))
        elif layer_desc["kind"] == "reverse":
            layers.append(ReversePermutation(layer_desc["d"]))
        else:
            raise ValueError(f"unknown layer kind {layer_desc['kind']!r}")
    return FlowModel(layers, d, desc.get("base", "standard"), desc.get("transformed_cond", False))


def standard_normal_logpdf(z: Tensor) -> Tensor:
    """Row-wise log N(z | 0, I) for a (B, d) tensor."""
    d = z.shape[-1]
    return ad.tsum(ad.square(z), axis=-1) * -0.5 - 0.5 * d * LOG_2PI


def diag_normal_logpdf(z: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Row-wise log N(z | mu, diag(sigma^2))."""
    d = z.shape[-1]
    r = (z - mu) / sigma
    return (ad.tsum(ad.square(r), axis=-1) * -0.5 - ad.tsum(ad.log(sigma), axis=-1)
            - 0.5 * d * LOG_2PI)


# functional API mirroring the layer methods

def _as_batch(x):
    x = as_tensor(x)
    return (ad.reshape(x, (1, -1)), True) if x.ndim == 1 else (x, False)


def _as_cond(cond):
    if cond is None:
        return None
    c = as_tensor(cond)
    return ad.reshape(c, (1, -1)) if c.ndim == 1 else c


def coupling_forward(x, layer: CouplingLayer, cond=None):
    xb, vec = _as_batch(x)
    y, ld = layer.forward(xb, _as_cond(cond))
    return (ad.reshape(y, (-1,)), ad.reshape(ld, ())) if vec else (y, ld)


def coupling_inverse(y, layer: CouplingLayer, cond=None):
    yb, vec = _as_batch(y)
    x = layer.inverse(yb, _as_cond(cond))
    return ad.reshape(x, (-1,)) if vec else x


def norm_init(layer: InvertibleNorm, batch) -> None:
    layer.initialize(batch)


def flow_forward(model: FlowModel, x, cond=None):
    return model.forward(x, cond)


def flow_inverse(model: FlowModel, z, cond=None):
    return model.inverse(z, cond)


def log_likelihood(model: FlowModel, x) -> Tensor:
    """log p_Z(q(x)) + log|det dq/dx| under a standard normal base."""
    if model.base != "standard":
        raise ValueError("log_likelihood needs a standard normal base")
    xb, vec = _as_batch(x)
    z, ld = model.forward(xb)
    ll = standard_normal_logpdf(z) + ld
    return ad.reshape(ll, ()) if vec else ll


# logit preprocessing

@dataclass(frozen=True)
class PreprocessConfig:
    alpha: float = 0.05
    dequantize: bool = False
    levels: int = 256

    def __post_init__(self):
        if not 0.0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")
        if self.levels < 2:
            raise ValueError("levels must be at least 2")


def logit_preprocess(x, cfg: PreprocessConfig, rng: Optional[np.random.Generator] = None):
    """Map [0,1] data to logit space; returns ``(y, logdet)`` with per-row logdet.

    With ``dequantize`` the input gets uniform noise of width ``1/levels``
    (rescaled so the result stays in [0, 1]).
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise DomainError("logit preprocessing needs inputs in [0, 1]")
    if cfg.dequantize:
        rng = rng if rng is not None else np.random.default_rng()
        x = (x * (cfg.levels - 1) + rng.uniform(size=x.shape)) / cfg.levels
    a = cfg.alpha
    p = a + (1.0 - 2.0 * a) * x
    y = np.log(p) - np.log1p(-p)
    logdet = np.sum(math.log(1.0 - 2.0 * a) - np.log(p) - np.log1p(-p), axis=-1)
    return y, logdet


def logit_inverse(y, cfg: PreprocessConfig) -> np.ndarray:
    """Undo :func:`logit_preprocess` (recovers the dequantized input)."""
    y = np.asarray(y, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-y))
    return (p - cfg.alpha) / (1.0 - 2.0 * cfg.alpha)

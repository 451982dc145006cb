"""Parameter containers and the small MLPs used by couplings and heads."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Collects trainable tensors from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / max(n_in, 1)), size=(n_in, n_out))
        self.weight = param(w)
        self.bias = param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class MLP(Module):
    """tanh MLP; ``zero_last`` makes the network output exactly zero at init."""

    def __init__(self, n_in: int, n_out: int, hidden: int = 64, depth: int = 2,
                 rng: Optional[np.random.Generator] = None, zero_last: bool = True,
                 final_activation: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [n_in] + [hidden] * depth + [n_out]
        self.layers = [Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self._final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self._final_activation:
                x = ad.tanh(x)
        return x

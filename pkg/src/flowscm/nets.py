"""Trainable building blocks assembled from the tensor engine."""

from __future__ import annotations

import numpy as np

from .numerics import Tensor, add_bias, leaky_relu, matmul, mul, tanh


class Module:
    """Base with reflective parameter discovery.

    Attributes that are requires_grad tensors count as parameters;
    Module attributes and lists of Modules are walked recursively in
    insertion order, so parameter naming is deterministic.
    """

    def named_params(self, prefix: str = ""):
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out.append((prefix + name, val))
            elif isinstance(val, Module):
                out.extend(val.named_params(f"{prefix}{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_params(f"{prefix}{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{prefix}{name}.{i}", item))
        return out

    def params(self):
        return [t for _, t in self.named_params()]

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()


def _init_weight(nin: int, nout: int, rng: np.random.Generator, scheme: str) -> np.ndarray:
    if scheme == "zeros":
        return np.zeros((nin, nout))
    if scheme == "leaky":
        std = np.sqrt(2.0 / nin)
    elif scheme == "tanh":
        std = np.sqrt(1.0 / nin)
    elif scheme == "linear":
        std = np.sqrt(1.0 / nin)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return std * rng.standard_normal((nin, nout))


class Linear(Module):
    def __init__(self, nin: int, nout: int, rng: np.random.Generator, init: str = "linear"):
        self.W = Tensor(_init_weight(nin, nout, rng, init), requires_grad=True)
        self.b = Tensor(np.zeros(nout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.W), self.b)


class MaskedLinear(Module):
    """Linear map with a fixed 0/1 connectivity mask on the weights."""

    def __init__(self, nin: int, nout: int, mask: np.ndarray, rng: np.random.Generator, init: str = "linear"):
        if mask.shape != (nin, nout):
            raise ValueError(f"mask shape {mask.shape} != ({nin}, {nout})")
        self.W = Tensor(_init_weight(nin, nout, rng, init), requires_grad=True)
        self.b = Tensor(np.zeros(nout), requires_grad=True)
        self.mask = Tensor(mask.astype(np.float64))

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, mul(self.W, self.mask)), self.b)


_ACTIVATIONS = {
    "tanh": tanh,
    "leaky_relu": lambda t: leaky_relu(t, 0.01),
    "linear": lambda t: t,
}


class Mlp(Module):
    """Stack of Linear layers with per-layer activations.

    ``widths`` has len(activations) + 1 entries; ``inits`` optionally
    overrides the per-layer weight init (defaults follow activations).
    """

    def __init__(self, widths, activations, rng: np.random.Generator, inits=None):
        if len(widths) != len(activations) + 1:
            raise ValueError("widths/activations length mismatch")
        if inits is None:
            inits = [a if a in ("tanh", "leaky") else ("leaky" if a == "leaky_relu" else "linear") for a in activations]
        self.layers = [
            Linear(widths[i], widths[i + 1], rng, init=inits[i]) for i in range(len(activations))
        ]
        self.activations = list(activations)

    def __call__(self, x: Tensor) -> Tensor:
        for layer, act in zip(self.layers, self.activations):
            x = _ACTIVATIONS[act](layer(x))
        return x

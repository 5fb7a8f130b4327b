"""Small MLP building block shared by the offset, fuser and refinement heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .tensor import DiffTensor, ShapeError

ACTIVATIONS = {
    "relu": ops.relu,
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
    "softplus": ops.softplus,
    "identity": lambda x: x,
}


@dataclass
class Linear:
    weight: DiffTensor  # (in, out)
    bias: DiffTensor  # (out,)
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int,
                activation: str = "identity", gain: float = 1.0,
                name: str = "") -> Linear:
    """Glorot-uniform weights, zero bias."""
    limit = gain * np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(in_dim, out_dim))
    return Linear(DiffTensor(w, requires_grad=True, name=f"{name}.weight"),
                  DiffTensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.bias"),
                  activation)


def init_mlp(rng: np.random.Generator, dims, hidden_activation: str = "relu",
             out_gain: float = 1.0, name: str = "mlp") -> list[Linear]:
    """Layers for ``dims = [in, h1, ..., out]``; the last layer is linear."""
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        layers.append(init_linear(rng, a, b, "identity" if last else hidden_activation,
                                  gain=out_gain if last else 1.0, name=f"{name}.{i}"))
    return layers


def linear_forward(layer: Linear, x: DiffTensor) -> DiffTensor:
    if x.shape[-1] != layer.in_dim:
        raise ShapeError("linear", x.shape, layer.weight.shape)
    return ACTIVATIONS[layer.activation](ops.add(ops.matmul(x, layer.weight), layer.bias))


def mlp_forward(layers: list[Linear], x: DiffTensor) -> DiffTensor:
    """Apply an affine+activation stack to the rows of ``x``."""
    for i, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
        if a.out_dim != b.in_dim:
            raise ShapeError("mlp", a.weight.shape, b.weight.shape,
                             detail=f"layer {i} output does not feed layer {i + 1}")
    squeeze = x.ndim == 1
    if squeeze:
        x = ops.reshape(x, (1, -1))
    for layer in layers:
        x = linear_forward(layer, x)
    return ops.reshape(x, (-1,)) if squeeze else x


def mlp_parameters(layers: list[Linear], prefix: str) -> dict[str, DiffTensor]:
    out = {}
    for i, layer in enumerate(layers):
        out[f"{prefix}.{i}.weight"] = layer.weight
        out[f"{prefix}.{i}.bias"] = layer.bias
    return out


def zero_layer(layer: Optional[Linear]) -> None:
    if layer is not None:
        layer.weight.values[...] = 0
        layer.bias.values[...] = 0

"""Fully connected networks on top of the autodiff tensors."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from . import engine as T
from .engine import Tensor

ACTIVATIONS = {
    "relu": T.relu,
    "softplus": T.softplus,
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
    "linear": lambda x: x,
}


class MLP:
    """Affine + activation stack with a linear final layer.

    ``widths`` lists every layer width including input and output, e.g.
    ``[456, 400, 131]`` is one hidden layer of 400 units.  Hidden layers use
    fan-in scaled uniform init; the output layer starts at zero when
    ``zero_output`` is set (the residual deformation nets rely on that).
    """

    def __init__(self, widths, activation="softplus", rng=None, zero_output=True,
                 dtype=np.float64, name="mlp"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigurationError(f"invalid layer widths {widths}")
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = widths
        self.activation = activation
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        n_layers = len(widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            if i == n_layers - 1 and zero_output:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if i == n_layers - 1 and zero_output:
                b = np.zeros(fan_out)
            else:
                b = rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in), size=fan_out)
            self.weights.append(T.tensor(w, requires_grad=True, dtype=dtype, name=f"{name}.w{i}"))
            self.biases.append(T.tensor(b, requires_grad=True, dtype=dtype, name=f"{name}.b{i}"))

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.widths[-1]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def set_requires_grad(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, x):
        return mlp_forward(self.parameters(), x, self.widths, self.activation)


def mlp_forward(params, x, widths, activation="softplus"):
    """Run ``x`` through alternating (W, b) pairs; the last layer is linear."""
    if len(params) != 2 * (len(widths) - 1):
        raise ConfigurationError("parameter list does not match architecture")
    act = ACTIVATIONS[activation]
    h = x
    n_layers = len(widths) - 1
    if h.shape[-1] != widths[0]:
        raise ConfigurationError(f"input width {h.shape[-1]} != network input width {widths[0]}")
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        if w.shape != (widths[i], widths[i + 1]):
            raise ConfigurationError(f"layer {i} weight shape {w.shape} != {(widths[i], widths[i + 1])}")
        h = T.matmul(h, w) + b
        if i < n_layers - 1:
            h = act(h)
    return h

"""Parameterized building blocks: affine layers, MLPs, layer normalization."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + k, v) for k, v in self._params.items()]
        for k, m in self._children.items():
            out.extend(m.named_parameters(f"{prefix}{k}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        for k, p in self.named_parameters():
            if k not in state:
                raise KeyError(f"missing parameter {k!r}")
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        super().__init__()
        self.w = self.param("w", rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out)))
        self.b = self.param("b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = self.param("gain", np.ones(dim))
        self.bias = self.param("bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """``hidden_layers`` LeakyReLU layers of width ``hidden`` followed by a linear output."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, hidden: int = 32,
                 hidden_layers: int = 2, out_scale: float = 1.0, slope: float = 0.01):
        super().__init__()
        self.slope = slope
        dims = [n_in] + [hidden] * hidden_layers
        self.layers = [self.child(f"l{i}", Linear(a, b, rng)) for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        self.out = self.child("out", Linear(dims[-1], n_out, rng, scale=out_scale))

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = ad.leaky_relu(layer(x), self.slope)
        return self.out(x)

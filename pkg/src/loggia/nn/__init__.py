"""Minimal reverse-mode autodiff and neural network building blocks."""

from .autodiff import Segments, Tensor
from .layers import MLP, LayerNorm, Linear, Module
from .optim import Adam, clip_grad_norm, grad_norm

__all__ = ["Tensor", "Segments", "Module", "Linear", "LayerNorm", "MLP", "Adam", "clip_grad_norm", "grad_norm"]

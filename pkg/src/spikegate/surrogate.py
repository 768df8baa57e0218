"""Heaviside spiking with surrogate pseudo-derivatives.

The forward pass always emits exact 0/1 spikes. Backward replaces the
Dirac delta with one of two pseudo-derivatives of ``x = v - v_th``:

* rectangular:   1/(2a) on |x| <= a, else 0
* fast-sigmoid:  (1/a) / (1 + |x|/a)^2

``smooth=True`` swaps the Heaviside for the antiderivative of the chosen
surrogate, a continuous gate whose true derivative *is* the surrogate. That
smoothed forward is what finite-difference gradient checks run against.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ValidationError

KINDS = ("rectangular", "fast-sigmoid")


@dataclass(frozen=True)
class SurrogateShape:
    kind: str = "rectangular"
    width: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown surrogate kind {self.kind!r}; expected one of {KINDS}")
        if not self.width > 0:
            raise ValidationError(f"surrogate width must be > 0, got {self.width}")


def spike_backward(x: torch.Tensor, shape: SurrogateShape) -> torch.Tensor:
    """Pseudo-derivative of the spike nonlinearity at ``x = v - v_th``."""
    a = shape.width
    if shape.kind == "rectangular":
        return (x.abs() <= a).to(x.dtype) / (2 * a)
    return (1.0 / a) / (1.0 + x.abs() / a) ** 2


def soft_gate(x: torch.Tensor, shape: SurrogateShape) -> torch.Tensor:
    """Antiderivative of :func:`spike_backward`, equal to 0.5 at x = 0."""
    a = shape.width
    if shape.kind == "rectangular":
        return (x / (2 * a) + 0.5).clamp(0.0, 1.0)
    return 0.5 + x / (a + x.abs())


class _Heaviside(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.save_for_backward(x)
        ctx.shape = shape
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        return grad_out * spike_backward(x, ctx.shape), None


def heaviside(x: torch.Tensor, shape: SurrogateShape, smooth: bool = False) -> torch.Tensor:
    """Spike function Theta(x) with Theta(0) = 1."""
    if smooth:
        return soft_gate(x, shape)
    return _Heaviside.apply(x, shape)


def is_active(s: torch.Tensor) -> torch.Tensor:
    """Boolean spike presence; agrees with the hard forward for smoothed gates."""
    return s >= 0.5

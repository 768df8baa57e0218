"""Instrumented tensor contractions.

Every linear map in the forward pass goes through one of these helpers so a
per-call :class:`OpCounter` can tally multiply-accumulates from the shapes
actually executed. Elementwise work (activations, gating, softmax) is not
counted; FLOPs are taken as 2 x MACs.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Optional

import torch
import torch.nn.functional as F


class OpCounter:
    """Ordered per-stage MAC tally. One instance per forward call."""

    def __init__(self):
        self.macs: "OrderedDict[str, int]" = OrderedDict()

    def add(self, stage: str, macs: int) -> None:
        self.macs[stage] = self.macs.get(stage, 0) + int(macs)

    def total(self) -> int:
        return sum(self.macs.values())

    def __getitem__(self, stage: str) -> int:
        return self.macs.get(stage, 0)


def _count(counter: Optional[OpCounter], stage: str, macs: int) -> None:
    if counter is not None:
        counter.add(stage, macs)


def matmul(a: torch.Tensor, b: torch.Tensor, counter: Optional[OpCounter] = None,
           stage: str = "matmul") -> torch.Tensor:
    out = torch.matmul(a, b)
    _count(counter, stage, out.numel() * a.shape[-1])
    return out


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
           counter: Optional[OpCounter] = None, stage: str = "linear") -> torch.Tensor:
    out = F.linear(x, weight, bias)
    _count(counter, stage, out.numel() * weight.shape[1])
    return out


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
           stride: int = 1, padding: int = 0, counter: Optional[OpCounter] = None,
           stage: str = "conv") -> torch.Tensor:
    out = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    c_in, kh, kw = weight.shape[1:]
    _count(counter, stage, out.numel() * c_in * kh * kw)
    return out

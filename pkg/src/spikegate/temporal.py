"""
Exponential temporal weighting of tokens and its use as an attention bias.

    w_timing   = exp(-alpha * t_first)
    w_interval = exp(-beta  * t_interval)
    w_combined = w_timing * w_interval * sigmoid(gamma * f_rate)

``alpha`` and ``beta`` are stored as logs so they stay positive. The combined
weight enters multi-head attention as an additive ``log(w + eps)`` on every
key column, so a uniform weight reduces exactly to plain attention.

A cue can be switched off through ``ablate``: the timing or interval factor
becomes 1, the rate factor becomes 0.5 (as if ``gamma`` were 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import torch
from torch import nn

from .encoder import SpikeInfo
from .errors import ValidationError
from .ops import OpCounter, linear, matmul

CUES = ("timing", "interval", "rate")
LOG_EPS = 1e-8


def parse_ablation(ablate) -> frozenset:
    if isinstance(ablate, str):
        ablate = [a.strip() for a in ablate.split(",") if a.strip()]
    out = frozenset(ablate or ())
    unknown = out - set(CUES)
    if unknown:
        raise ValidationError(f"unknown ablation cue(s) {sorted(unknown)}; choose from {CUES}")
    return out


@dataclass
class TemporalWeights:
    w_timing: torch.Tensor
    w_interval: torch.Tensor
    w_combined: torch.Tensor


def temporal_weights(cues: SpikeInfo, alpha, beta, gamma,
                     ablate: Iterable[str] = ()) -> TemporalWeights:
    ablate = parse_ablation(ablate)
    one = torch.ones_like(cues.t_first)
    w_t = one if "timing" in ablate else torch.exp(-alpha * cues.t_first)
    w_i = one if "interval" in ablate else torch.exp(-beta * cues.t_interval)
    w_r = 0.5 * one if "rate" in ablate else torch.sigmoid(gamma * cues.f_rate)
    return TemporalWeights(w_t, w_i, w_t * w_i * w_r)


def bias_attention(x: torch.Tensor, w_combined: torch.Tensor, wq: torch.Tensor,
                   wk: torch.Tensor, wv: torch.Tensor, wo: torch.Tensor, heads: int = 1,
                   counter: Optional[OpCounter] = None, stage: str = "msp",
                   return_attn: bool = False):
    """Multi-head self-attention over all tokens with a log-weight key bias.

    ``x`` is ``(..., N, d)`` and ``w_combined`` is ``(..., N)``. Returns the
    ``(..., N, d)`` output and, if requested, the ``(..., heads, N, N)``
    attention distributions.
    """
    if not torch.isfinite(x).all():
        raise ValidationError("non-finite token features entering biased attention")
    *lead, N, d = x.shape
    if w_combined.shape[-1] != N:
        raise ValidationError(f"weights length {w_combined.shape[-1]} != token count {N}")
    if d % heads:
        raise ValidationError(f"{heads} heads do not divide width {d}")
    dh = d // heads

    def split(t):
        return t.reshape(*lead, N, heads, dh).transpose(-3, -2)

    q = split(linear(x, wq, counter=counter, stage=f"{stage}.proj"))
    k = split(linear(x, wk, counter=counter, stage=f"{stage}.proj"))
    v = split(linear(x, wv, counter=counter, stage=f"{stage}.proj"))
    scores = matmul(q, k.transpose(-1, -2), counter, f"{stage}.attn") / math.sqrt(dh)
    scores = scores + torch.log(w_combined + LOG_EPS).unsqueeze(-2).unsqueeze(-3)
    attn = torch.softmax(scores, dim=-1)
    out = matmul(attn, v, counter, f"{stage}.attn").transpose(-3, -2).reshape(*lead, N, d)
    out = linear(out, wo, counter=counter, stage=f"{stage}.proj")
    return (out, attn) if return_attn else out


class TemporalBias(nn.Module):
    """Learnable decay rates plus one biased attention block per feature scale."""

    def __init__(self, widths: Sequence[int], heads: int = 1, alpha: float = 1.0,
                 beta: float = 0.1, gamma: float = 1.0, ablate=(), seed: int = 0):
        super().__init__()
        if alpha <= 0 or beta <= 0:
            raise ValidationError("alpha and beta must be positive")
        for d in widths:
            if d % heads:
                raise ValidationError(f"msp heads={heads} must divide every branch width {tuple(widths)}")
        gen = torch.Generator().manual_seed(seed + 307)
        self.widths = tuple(widths)
        self.heads = heads
        self.ablate = parse_ablation(ablate)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(alpha), dtype=torch.float64))
        self.log_beta = nn.Parameter(torch.tensor(math.log(beta), dtype=torch.float64))
        self.gamma = nn.Parameter(torch.tensor(float(gamma), dtype=torch.float64))
        self.proj = nn.ParameterList()
        for d in self.widths:
            for _ in range(4):
                self.proj.append(nn.Parameter(
                    torch.randn(d, d, generator=gen, dtype=torch.float64) / math.sqrt(d)))

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    @property
    def beta(self) -> torch.Tensor:
        return self.log_beta.exp()

    def weights(self, cues: SpikeInfo) -> TemporalWeights:
        return temporal_weights(cues, self.alpha, self.beta, self.gamma, self.ablate)

    def forward(self, x: torch.Tensor, w_combined: torch.Tensor,
                counter: Optional[OpCounter] = None,
                return_attn: bool = False) -> Tuple[torch.Tensor, list]:
        outs, maps, start = [], [], 0
        for i, d in enumerate(self.widths):
            wq, wk, wv, wo = self.proj[4 * i: 4 * i + 4]
            o = bias_attention(x[..., start:start + d], w_combined, wq, wk, wv, wo, self.heads,
                               counter, "msp", return_attn)
            if return_attn:
                o, a = o
                maps.append(a)
            outs.append(o)
            start += d
        return torch.cat(outs, -1), maps

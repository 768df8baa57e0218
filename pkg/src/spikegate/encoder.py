"""
Spatio-temporal spike encoder and temporal cue extraction.

Tokens are non-overlapping spatial patches of a spike tensor. A token "spikes"
at step t when any channel of any cell in its patch spikes. From the token
spike trains four cues are derived:

=============  ===============================================  ===========
cue            definition                                       silent
=============  ===============================================  ===========
``t_first``    first spike step / T                             1.0
``t_interval`` mean inter-spike interval in steps               T
``t_burst``    fraction of inter-spike intervals <= 2 steps     0.0
``f_rate``     spike count / T                                  0.0
=============  ===============================================  ===========

``t_interval`` and ``t_burst`` fall back to their sentinels when a token has
fewer than two spikes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from .errors import ValidationError
from .hilif import HILIFParams, init_heterogeneous, run_sequence
from .ops import OpCounter, conv2d, linear
from .surrogate import SurrogateShape, is_active

BURST_ISI = 2


@dataclass
class SpikeInfo:
    """Per-token temporal cues; every field is ``(..., N)``."""

    t_first: torch.Tensor
    t_interval: torch.Tensor
    t_burst: torch.Tensor
    f_rate: torch.Tensor
    T: int
    grid: Tuple[int, int]

    @property
    def n_tokens(self) -> int:
        return self.f_rate.shape[-1]

    def gather(self, idx: torch.Tensor) -> "SpikeInfo":
        """Reorder/duplicate tokens along the last axis (``idx`` shaped like a field)."""
        def g(v):
            return torch.gather(v, -1, idx) if idx.dim() == v.dim() else v[..., idx]
        return SpikeInfo(g(self.t_first), g(self.t_interval), g(self.t_burst),
                         g(self.f_rate), self.T, self.grid)

    def __getitem__(self, b) -> "SpikeInfo":
        """Select batch item(s)."""
        return SpikeInfo(self.t_first[b], self.t_interval[b], self.t_burst[b],
                         self.f_rate[b], self.T, self.grid)

    def stack(self) -> torch.Tensor:
        """``(..., N, 4)`` matrix in field order."""
        return torch.stack([self.t_first, self.t_interval, self.t_burst, self.f_rate], -1)


def token_activity(spikes: torch.Tensor, patch: Tuple[int, int] = (1, 1)) -> torch.Tensor:
    """Boolean ``(..., T, N)`` token spike trains from ``(..., T, C, H, W)`` spikes."""
    ph, pw = patch
    *lead, T, C, H, W = spikes.shape
    if ph < 1 or pw < 1 or H % ph or W % pw:
        raise ValidationError(f"patch {ph}x{pw} does not divide grid {H}x{W}")
    a = is_active(spikes).reshape(*lead, T, C, H // ph, ph, W // pw, pw)
    a = a.any(dim=-1).any(dim=-2).any(dim=-3)
    return a.reshape(*lead, T, (H // ph) * (W // pw))


def extract_cues(spikes: torch.Tensor, patch: Tuple[int, int] = (1, 1)) -> SpikeInfo:
    """Temporal cues for every patch token of ``(T, C, H, W)`` or ``(B, T, C, H, W)`` spikes."""
    if spikes.dim() not in (4, 5):
        raise ValidationError(f"expected (T,C,H,W) or (B,T,C,H,W) spikes, got {tuple(spikes.shape)}")
    T, _, H, W = spikes.shape[-4:]
    if T < 1:
        raise ValidationError("need at least one timestep")
    act = token_activity(spikes.detach(), patch)
    act = act.movedim(-2, 0)  # (T, ..., N)
    dt = torch.float64
    count = act.sum(0).to(dt)
    first = torch.full(act.shape[1:], T, dtype=torch.long)
    last = torch.full(act.shape[1:], -1, dtype=torch.long)
    short = torch.zeros(act.shape[1:], dtype=dt)
    for t in range(T):
        a = act[t]
        seen = last >= 0
        short += (a & seen & (t - last <= BURST_ISI)).to(dt)
        first = torch.where(a & ~seen, torch.full_like(first, t), first)
        last = torch.where(a, torch.full_like(last, t), last)
    multi = count >= 2
    gaps = (count - 1).clamp(min=1)
    t_interval = torch.where(multi, (last - first).to(dt) / gaps, torch.full_like(count, float(T)))
    t_burst = torch.where(multi, short / gaps, torch.zeros_like(count))
    return SpikeInfo(
        t_first=first.to(dt) / T,
        t_interval=t_interval,
        t_burst=t_burst,
        f_rate=count / T,
        T=T,
        grid=(H // patch[0], W // patch[1]),
    )


def timing_attention(features: torch.Tensor, cues: SpikeInfo, theta: torch.Tensor,
                     counter: Optional[OpCounter] = None) -> torch.Tensor:
    """Scale each token row by ``sigmoid(theta . [f_rate, 1 - t_first, t_burst])``."""
    if features.shape[:-1] != cues.f_rate.shape:
        raise ValidationError(
            f"features {tuple(features.shape)} and cues {tuple(cues.f_rate.shape)} disagree on N"
        )
    z = torch.stack([cues.f_rate, 1.0 - cues.t_first, cues.t_burst], -1)
    g = torch.sigmoid(linear(z, theta.view(1, 3), counter=counter, stage="sten.timing_attention"))
    return features * g


def branch_widths(dim: int) -> Tuple[int, int, int]:
    """Default split D/4 (1x1), D/2 (3x3 + HI-LIF), remainder (pooled)."""
    a = max(1, dim // 4)
    b = max(1, dim // 2)
    c = dim - a - b
    if c < 1:
        raise ValidationError(f"feature dim {dim} too small for three branches")
    return a, b, c


def _uniform(shape, fan_in, gen, lo=-1.0, hi=1.0):
    bound = math.sqrt(6.0 / fan_in)
    return (lo + (hi - lo) * torch.rand(shape, generator=gen, dtype=torch.float64)) * bound


def _excitatory(shape, fan_in, gen):
    # sparse binary input needs a positive mean drive to reach threshold at all
    return _uniform(shape, fan_in, gen, -0.5, 1.5)


@dataclass
class LIFPrior:
    mu_tau: float = 2.0
    sigma_tau: float = 0.3
    mu_vth: float = 1.0
    sigma_vth: float = 0.2
    reset_mode: str = "soft"
    v_reset: float = 0.0

    def make(self, C: int, seed: int) -> HILIFParams:
        return init_heterogeneous(C, self.mu_tau, self.sigma_tau, self.mu_vth, self.sigma_vth,
                                  self.reset_mode, seed, self.v_reset)


class SpikeEncoder(nn.Module):
    """Cascaded stride-2 spiking stem followed by three parallel branches.

    * stem: ``stages`` x (3x3 stride-2 conv -> HI-LIF)
    * branch A: 1x1 conv
    * branch B: 3x3 conv -> HI-LIF
    * branch C: global average pool -> 1x1 conv, broadcast over the grid

    Branch outputs are concatenated and averaged over time.
    """

    def __init__(self, in_channels: int = 2, stem_channels: int = 8, stages: int = 2,
                 dim: int = 32, widths: Optional[Sequence[int]] = None,
                 prior: Optional[LIFPrior] = None, seed: int = 0):
        super().__init__()
        prior = prior or LIFPrior()
        gen = torch.Generator().manual_seed(seed)
        self.stages = stages
        self.in_channels = in_channels
        self.widths = tuple(widths) if widths is not None else branch_widths(dim)
        if sum(self.widths) != dim or len(self.widths) != 3 or min(self.widths) < 1:
            raise ValidationError(f"branch widths {self.widths} must be 3 positive ints summing to {dim}")
        self.dim = dim

        self.stem_w = nn.ParameterList()
        self.stem_b = nn.ParameterList()
        self.stem_lif = nn.ModuleList()
        c = in_channels
        for i in range(stages):
            self.stem_w.append(nn.Parameter(_excitatory((stem_channels, c, 3, 3), 9 * c, gen)))
            self.stem_b.append(nn.Parameter(torch.zeros(stem_channels, dtype=torch.float64)))
            self.stem_lif.append(prior.make(stem_channels, seed + 101 + i))
            c = stem_channels
        self.channels = c
        da, db, dc = self.widths
        self.a_w = nn.Parameter(_uniform((da, c, 1, 1), c, gen))
        self.a_b = nn.Parameter(torch.zeros(da, dtype=torch.float64))
        self.b_w = nn.Parameter(_excitatory((db, c, 3, 3), 9 * c, gen))
        self.b_b = nn.Parameter(torch.zeros(db, dtype=torch.float64))
        self.b_lif = prior.make(db, seed + 211)
        self.c_w = nn.Parameter(_uniform((dc, c, 1, 1), c, gen))
        self.c_b = nn.Parameter(torch.zeros(dc, dtype=torch.float64))
        self.theta = nn.Parameter(torch.ones(3, dtype=torch.float64))

    def lif_layers(self) -> List[HILIFParams]:
        return list(self.stem_lif) + [self.b_lif]

    @staticmethod
    def _spiking_conv(x, weight, bias, lif, stride, surrogate, smooth, counter, stage):
        B, T = x.shape[:2]
        y = conv2d(x.flatten(0, 1), weight, bias, stride=stride, padding=weight.shape[-1] // 2,
                   counter=counter, stage=stage)
        y = y.unflatten(0, (B, T)).transpose(0, 1)  # (T, B, C, H, W)
        s, _ = run_sequence(y, lif, surrogate, smooth)
        return s.transpose(0, 1)

    def stem(self, x: torch.Tensor, surrogate: Optional[SurrogateShape] = None,
             smooth: bool = False, counter: Optional[OpCounter] = None) -> torch.Tensor:
        """``(B, T, C_in, H, W)`` spikes -> ``(B, T, C, H', W')`` stem spikes."""
        if x.dim() != 5:
            raise ValidationError(f"expected (B, T, C, H, W) input, got {tuple(x.shape)}")
        if x.shape[2] != self.in_channels:
            raise ValidationError(f"encoder expects {self.in_channels} input channels, got {x.shape[2]}")
        for i in range(self.stages):
            x = self._spiking_conv(x, self.stem_w[i], self.stem_b[i], self.stem_lif[i], 2,
                                   surrogate, smooth, counter, "sten.stem")
        return x

    def branches(self, s: torch.Tensor, surrogate: Optional[SurrogateShape] = None,
                 smooth: bool = False, counter: Optional[OpCounter] = None) -> torch.Tensor:
        """Stem spikes ``(B, T, C, H, W)`` -> token features ``(B, N, D)``."""
        B, T, C, H, W = s.shape
        if C != self.channels:
            raise ValidationError(f"encoder expects {self.channels} channels, got {C}")
        flat = s.flatten(0, 1)
        fa = conv2d(flat, self.a_w, self.a_b, counter=counter, stage="sten.branch_a")
        fb = self._spiking_conv(s, self.b_w, self.b_b, self.b_lif, 1, surrogate, smooth,
                                counter, "sten.branch_b").flatten(0, 1)
        pooled = flat.mean(dim=(-2, -1), keepdim=True)
        fc = conv2d(pooled, self.c_w, self.c_b, counter=counter, stage="sten.branch_c")
        fc = fc.expand(-1, -1, H, W)
        f = torch.cat([fa, fb, fc], 1).unflatten(0, (B, T)).mean(1)  # (B, D, H, W)
        return f.flatten(2).transpose(1, 2)


def encode_multiscale(spikes: torch.Tensor, encoder: SpikeEncoder,
                      surrogate: Optional[SurrogateShape] = None, smooth: bool = False,
                      counter: Optional[OpCounter] = None) -> torch.Tensor:
    """Full encoder pass: ``(B, T, C_in, H, W)`` -> ``(B, N, D)`` token features."""
    return encoder.branches(encoder.stem(spikes, surrogate, smooth, counter),
                            surrogate, smooth, counter)

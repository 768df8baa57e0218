"""
Token scoring, dynamic top-K selection, gating and patch grouping.

Pipeline per sample:

1. ``f_input = [mean(f_rate), std(t_first), mean(t_interval)]``;
   ``rho = sigmoid(MLP(f_input))`` is the predicted fraction of tokens to drop.
2. ``K = max(K_min, round_half_up(N * (1 - rho)))``.
3. Three per-token scores (center-surround contrast of the rate map, the
   temporal weight, the urgency triad) are fused by a shared per-token MLP.
4. The K best fused scores form a binary mask; selected rows are scaled by
   ``g_enh >= 1`` and the rest by ``g_sup`` in [0, 1]. Nothing is removed here.

Ties in every ranking go to the lower token index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import SpikeInfo
from .errors import ValidationError
from .ops import OpCounter, conv2d, linear
from .surrogate import SurrogateShape, heaviside

DOG_SIZE = 5
DOG_SIGMA_CENTER = 0.8
DOG_SIGMA_SURROUND = 1.6


@dataclass
class SparsityDecision:
    f_input: torch.Tensor
    rho: float
    K: int
    s_spatial: torch.Tensor
    s_msp: torch.Tensor
    s_temporal: torch.Tensor
    s_combined: torch.Tensor
    mask: torch.Tensor

    def rows(self):
        for n in range(len(self.mask)):
            yield (n, float(self.s_spatial[n]), float(self.s_msp[n]), float(self.s_temporal[n]),
                   float(self.s_combined[n]), int(self.mask[n]))


class ScoreMLP(nn.Module):
    """Two-layer ``in -> hidden -> 1`` map with a tanh between the layers."""

    def __init__(self, inputs: int = 3, hidden: int = 16, seed: int = 0, zero_output: bool = False):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.w1 = nn.Parameter(torch.randn(hidden, inputs, generator=gen, dtype=torch.float64)
                               / math.sqrt(inputs))
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=torch.float64))
        w2 = torch.randn(1, hidden, generator=gen, dtype=torch.float64) / math.sqrt(hidden)
        self.w2 = nn.Parameter(torch.zeros_like(w2) if zero_output else w2)
        self.b2 = nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, z: torch.Tensor, counter: Optional[OpCounter] = None,
                stage: str = "mlp") -> torch.Tensor:
        h = torch.tanh(linear(z, self.w1, self.b1, counter=counter, stage=stage))
        return linear(h, self.w2, self.b2, counter=counter, stage=stage)


def sparsity_features(cues: SpikeInfo, ablate: Iterable[str] = ()) -> torch.Tensor:
    ablate = frozenset(ablate)
    f = torch.stack([
        cues.f_rate.mean(-1),
        cues.t_first.std(-1, unbiased=False),
        cues.t_interval.mean(-1),
    ], -1)
    keep = torch.tensor([c not in ablate for c in ("rate", "timing", "interval")],
                        dtype=f.dtype)
    return f * keep


def predict_sparsity(cues: SpikeInfo, predictor: Callable, ablate: Iterable[str] = (),
                     counter: Optional[OpCounter] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return ``(f_input, rho)`` with ``rho`` in (0, 1)."""
    f = sparsity_features(cues, ablate)
    if counter is None:
        z = predictor(f)
    else:
        z = predictor(f, counter=counter, stage="stsg.predictor")
    return f, torch.sigmoid(z.squeeze(-1))


def dog_kernel(size: int = DOG_SIZE, sigma_c: float = DOG_SIGMA_CENTER,
               sigma_s: float = DOG_SIGMA_SURROUND) -> torch.Tensor:
    """Zero-sum difference of unit-mass Gaussians on a ``size`` x ``size`` support."""
    r = np.arange(size) - (size - 1) / 2
    d2 = r[:, None] ** 2 + r[None, :] ** 2
    gc = np.exp(-d2 / (2 * sigma_c ** 2))
    gs = np.exp(-d2 / (2 * sigma_s ** 2))
    return torch.from_numpy(gc / gc.sum() - gs / gs.sum())


def spatial_scores(rate_map: torch.Tensor, counter: Optional[OpCounter] = None) -> torch.Tensor:
    """Center-surround contrast of a ``(..., H_t, W_t)`` rate map, flattened to ``(..., N)``."""
    if rate_map.dim() < 2:
        raise ValidationError("rate map must be at least 2-D (H_t, W_t)")
    *lead, H, W = rate_map.shape
    k = dog_kernel().to(rate_map.dtype).view(1, 1, DOG_SIZE, DOG_SIZE)
    out = conv2d(rate_map.reshape(-1, 1, H, W), k, padding=DOG_SIZE // 2,
                 counter=counter, stage="stsg.spatial")
    return out.reshape(*lead, H * W)


def fuse_scores(s_spatial: torch.Tensor, s_msp: torch.Tensor, s_temporal: torch.Tensor,
                fusion: Callable, counter: Optional[OpCounter] = None) -> torch.Tensor:
    if not (s_spatial.shape == s_msp.shape == s_temporal.shape):
        raise ValidationError(
            f"score lengths differ: {tuple(s_spatial.shape)}, {tuple(s_msp.shape)}, "
            f"{tuple(s_temporal.shape)}"
        )
    z = torch.stack([s_spatial, s_msp, s_temporal], -1)
    if counter is None:
        return fusion(z).squeeze(-1)
    return fusion(z, counter=counter, stage="stsg.fusion").squeeze(-1)


def compute_k(rho, N: int, k_min: int):
    """``max(k_min, floor(N (1 - rho) + 0.5))``, capped at N. Works on floats or tensors."""
    if not 1 <= k_min <= N:
        raise ValidationError(f"need 1 <= K_min <= N, got K_min={k_min}, N={N}")
    if isinstance(rho, torch.Tensor):
        k = torch.floor(N * (1.0 - rho.detach()) + 0.5).long()
        return k.clamp(min=k_min, max=N)
    return min(N, max(k_min, int(math.floor(N * (1.0 - rho) + 0.5))))


def topk_mask(scores: torch.Tensor, K) -> torch.Tensor:
    """Boolean mask of the K largest entries along the last axis (ties to lower index)."""
    order = torch.sort(-scores.detach(), dim=-1, stable=True).indices
    ranks = torch.empty_like(order)
    ranks.scatter_(-1, order, torch.arange(scores.shape[-1]).expand_as(order))
    K = torch.as_tensor(K)
    return ranks < K.unsqueeze(-1) if K.dim() else ranks < K


def select_topk(s_combined: torch.Tensor, rho, N: int, k_min: int):
    """``(K, mask)`` for fused scores ``(..., N)`` and predicted sparsity ``rho``."""
    if s_combined.shape[-1] != N:
        raise ValidationError(f"score length {s_combined.shape[-1]} != N={N}")
    K = compute_k(rho, N, k_min)
    return K, topk_mask(s_combined, K)


def straight_through_mask(scores: torch.Tensor, mask: torch.Tensor, K: torch.Tensor,
                          surrogate: SurrogateShape, smooth: bool = False) -> torch.Tensor:
    """Float mask: hard top-K forward, surrogate gradient around the K-th/K+1-th midpoint.

    With ``smooth`` the forward itself is the surrogate's soft gate.
    """
    N = scores.shape[-1]
    s_sorted = torch.sort(scores, dim=-1, descending=True, stable=True).values
    K = torch.as_tensor(K).expand(scores.shape[:-1])
    full = K >= N
    kk = K.clamp(max=N - 1).unsqueeze(-1)
    thr = 0.5 * (torch.gather(s_sorted, -1, kk - 1) + torch.gather(s_sorted, -1, kk))
    h = heaviside(scores - thr, surrogate, smooth)
    if smooth:
        soft = h
    else:
        soft = mask.to(scores.dtype) + (h - h.detach())
    return torch.where(full.unsqueeze(-1), torch.ones_like(soft), soft)


class GateFactors(nn.Module):
    """``g_enh = 1 + softplus(raw_enh)`` and ``g_sup = sigmoid(raw_sup)``."""

    def __init__(self, g_enh: float = 1.5, g_sup: float = 0.5):
        super().__init__()
        if not g_enh > 1 or not 0 < g_sup < 1:
            raise ValidationError("initial factors need g_enh > 1 and 0 < g_sup < 1")
        self.raw_enh = nn.Parameter(torch.tensor(math.log(math.expm1(g_enh - 1.0)),
                                                 dtype=torch.float64))
        self.raw_sup = nn.Parameter(torch.tensor(math.log(g_sup / (1.0 - g_sup)),
                                                 dtype=torch.float64))

    @property
    def g_enh(self) -> torch.Tensor:
        return 1.0 + F.softplus(self.raw_enh)

    @property
    def g_sup(self) -> torch.Tensor:
        return torch.sigmoid(self.raw_sup)


def gate(f: torch.Tensor, mask: torch.Tensor, g_enh, g_sup) -> torch.Tensor:
    """``f * M * g_enh + f * (1 - M) * g_sup`` row-wise over ``(..., N, D)`` features."""
    if mask.shape != f.shape[:-1]:
        raise ValidationError(f"mask shape {tuple(mask.shape)} != token shape {tuple(f.shape[:-1])}")
    m = mask.to(f.dtype).unsqueeze(-1)
    return f * m * g_enh + f * (1.0 - m) * g_sup


def group_indices(f_rate: torch.Tensor, n_target: int) -> torch.Tensor:
    """Source token index for every output slot when resizing to ``n_target`` tokens.

    Shrinking keeps the highest-rate tokens in original order. Growing keeps
    every original in order and appends copies cycling through the tokens in
    descending-rate order.
    """
    if n_target < 1:
        raise ValidationError(f"n_target must be >= 1, got {n_target}")
    N = f_rate.shape[-1]
    order = torch.sort(-f_rate.detach(), dim=-1, stable=True).indices
    if N >= n_target:
        return torch.sort(order[..., :n_target], dim=-1).values
    base = torch.arange(N).expand(*f_rate.shape[:-1], N)
    extra = order[..., torch.arange(n_target - N) % N]
    return torch.cat([base, extra], -1)


def patch_group(tokens: torch.Tensor, f_rate: torch.Tensor, n_target: int) -> torch.Tensor:
    """Resize ``(..., N, D)`` tokens to exactly ``n_target`` rows without padding."""
    idx = group_indices(f_rate, n_target)
    return torch.gather(tokens, -2, idx.unsqueeze(-1).expand(*idx.shape, tokens.shape[-1]))

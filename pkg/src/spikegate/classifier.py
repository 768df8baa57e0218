"""
Hard top-K token cut, urgency-modulated sparse attention, and MAC accounting.

Urgency of token n::

    u[n] = w_e (1 - t_first) + w_i (1 - t_interval / T) + w_r f_rate + w_b t_burst

with ``w_e, w_i, w_r`` kept non-negative by softplus and ``w_b t_burst`` the
learned residual of the temporal-integration layer. The K most urgent tokens
are the only ones the attention stack ever touches. Inside each layer the
logits of query i are multiplied by ``1 + kappa * u_hat[i]`` (``u_hat`` is
urgency min-max scaled over the selected set), i.e. divided by a temperature
``1 / (1 + kappa u_hat)``: urgent queries attend more sharply.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import SpikeInfo
from .errors import ValidationError
from .ops import OpCounter, linear, matmul

_SOFTPLUS_ONE = math.log(math.e - 1.0)  # softplus(x) == 1


def priority_features(cues: SpikeInfo, ablate: Iterable[str] = ()) -> torch.Tensor:
    """``(..., N, 4)`` oriented cue matrix [early, short-interval, rate, burst]."""
    ablate = frozenset(ablate)
    z = torch.zeros_like(cues.f_rate)
    early = z if "timing" in ablate else 1.0 - cues.t_first
    short = z if "interval" in ablate else 1.0 - cues.t_interval / cues.T
    burst = z if "interval" in ablate else cues.t_burst
    rate = z if "rate" in ablate else cues.f_rate
    return torch.stack([early, short, rate, burst], -1)


def priority_scores(cues: SpikeInfo, weights=(1.0, 1.0, 1.0), residual: float = 0.0,
                    ablate: Iterable[str] = (), counter: Optional[OpCounter] = None) -> torch.Tensor:
    """Urgency ``u`` per token; unit weights and zero residual give the plain triad."""
    w = torch.cat([torch.as_tensor(weights, dtype=torch.float64).reshape(3),
                   torch.as_tensor(residual, dtype=torch.float64).reshape(1)])
    return linear(priority_features(cues, ablate), w.view(1, 4), counter=counter,
                  stage="sc.priority").squeeze(-1)


class PriorityParams(nn.Module):
    def __init__(self):
        super().__init__()
        self.raw = nn.Parameter(torch.full((3,), _SOFTPLUS_ONE, dtype=torch.float64))
        self.burst = nn.Parameter(torch.zeros((), dtype=torch.float64))

    @property
    def weights(self) -> torch.Tensor:
        return F.softplus(self.raw)

    def forward(self, cues: SpikeInfo, ablate=(), counter=None) -> torch.Tensor:
        return priority_scores(cues, self.weights, self.burst, ablate, counter)


def select_indices(u: torch.Tensor, K: int) -> torch.Tensor:
    """Indices of the K largest entries of 1-D ``u`` (ties to lower index), ascending."""
    N = u.shape[-1]
    if not 1 <= K <= N:
        raise ValidationError(f"cannot select K={K} of N={N} tokens")
    order = torch.sort(-u.detach(), stable=True).indices[:K]
    return torch.sort(order).values


def hard_select(tokens: torch.Tensor, u: torch.Tensor, K: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Keep the K most urgent rows of ``(N, D)`` tokens in their original order."""
    if K > tokens.shape[0]:
        raise ValidationError(f"K={K} exceeds token count {tokens.shape[0]}")
    idx = select_indices(u, K)
    return tokens[idx], idx


def _init(shape, fan_in, gen):
    return torch.randn(shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)


class AttentionLayer(nn.Module):
    def __init__(self, dim: int, ffn: int, gen: torch.Generator):
        super().__init__()
        self.wq, self.wk, self.wv, self.wo = (nn.Parameter(_init((dim, dim), dim, gen))
                                              for _ in range(4))
        self.w1 = nn.Parameter(_init((ffn, dim), dim, gen))
        self.b1 = nn.Parameter(torch.zeros(ffn, dtype=torch.float64))
        self.w2 = nn.Parameter(_init((dim, ffn), ffn, gen))
        self.b2 = nn.Parameter(torch.zeros(dim, dtype=torch.float64))


class SparseAttentionStack(nn.Module):
    def __init__(self, dim: int, layers: int = 2, heads: int = 4, ffn: int = 64,
                 kappa: float = 1.0, seed: int = 0):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"sc heads={heads} must divide dim={dim}")
        if kappa < 0:
            raise ValidationError("kappa must be >= 0")
        gen = torch.Generator().manual_seed(seed + 401)
        self.dim, self.heads = dim, heads
        self.layers = nn.ModuleList(AttentionLayer(dim, ffn, gen) for _ in range(layers))
        self.kappa = nn.Parameter(torch.tensor(float(kappa), dtype=torch.float64))


def normalized_urgency(u: torch.Tensor) -> torch.Tensor:
    lo = u.min(-1, keepdim=True).values
    hi = u.max(-1, keepdim=True).values
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (u - lo) / safe, torch.zeros_like(u))


def sparse_attention_stack(x: torch.Tensor, u: torch.Tensor, stack: SparseAttentionStack,
                           counter: Optional[OpCounter] = None, return_attn: bool = False):
    """Run the attention layers over ``(..., K, D)`` selected tokens."""
    *lead, K, D = x.shape
    if K < 1:
        raise ValidationError("attention stack needs at least one token")
    h = stack.heads
    dh = D // h
    sharpen = 1.0 + stack.kappa.clamp(min=0.0) * normalized_urgency(u)  # (..., K)
    sharpen = sharpen.unsqueeze(-2).unsqueeze(-1)  # (..., 1, K, 1)
    maps = []

    def split(t):
        return t.reshape(*lead, K, h, dh).transpose(-3, -2)

    for layer in stack.layers:
        q = split(linear(x, layer.wq, counter=counter, stage="sc.attn_proj"))
        k = split(linear(x, layer.wk, counter=counter, stage="sc.attn_proj"))
        v = split(linear(x, layer.wv, counter=counter, stage="sc.attn_proj"))
        logits = matmul(q, k.transpose(-1, -2), counter, "sc.attn_scores") / math.sqrt(dh)
        attn = torch.softmax(logits * sharpen, dim=-1)
        if return_attn:
            maps.append(attn)
        mixed = matmul(attn, v, counter, "sc.attn_scores").transpose(-3, -2).reshape(*lead, K, D)
        x = x + linear(mixed, layer.wo, counter=counter, stage="sc.attn_proj")
        hid = F.gelu(linear(x, layer.w1, layer.b1, counter=counter, stage="sc.ffn"))
        x = x + linear(hid, layer.w2, layer.b2, counter=counter, stage="sc.ffn")
    return (x, maps) if return_attn else x


class ClassifierHead(nn.Module):
    def __init__(self, dim: int, classes: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed + 503)
        self.weight = nn.Parameter(0.1 * _init((classes, dim), dim, gen))
        self.bias = nn.Parameter(torch.zeros(classes, dtype=torch.float64))


def classify(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
             counter: Optional[OpCounter] = None) -> torch.Tensor:
    """Mean-pool ``(..., K, D)`` tokens and map to class logits."""
    if x.shape[-2] < 1:
        raise ValidationError("classifier needs at least one token")
    return linear(x.mean(-2), weight, bias, counter=counter, stage="sc.head")


# --------------------------------------------------------------------------- #
# Operation accounting
# --------------------------------------------------------------------------- #

REPORT_HEADER = ("stage", "macs", "tokens_in", "tokens_out", "sparsity")


@dataclass
class StageCount:
    stage: str
    macs: int
    tokens_in: int
    tokens_out: int

    @property
    def sparsity(self) -> float:
        return 1.0 - self.tokens_out / self.tokens_in if self.tokens_in else 0.0


@dataclass
class OpCountReport:
    """Per-stage multiply-accumulate counts for one sample (FLOPs ~= 2 x MACs)."""

    stages: List[StageCount] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(s.macs for s in self.stages)

    def __getitem__(self, stage: str) -> StageCount:
        for s in self.stages:
            if s.stage == stage:
                return s
        raise KeyError(stage)

    def macs(self, prefix: str) -> int:
        return sum(s.macs for s in self.stages if s.stage == prefix or s.stage.startswith(prefix + "."))

    @property
    def sparsity(self) -> float:
        return self["sc.select"].sparsity

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# MACs count multiplies of linear maps only; FLOPs ~= 2 x MACs\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for s in self.stages:
            w.writerow([s.stage, s.macs, s.tokens_in, s.tokens_out, f"{s.sparsity:.6f}"])
        last = self.stages[-1].tokens_out if self.stages else 0
        first = self.stages[0].tokens_in if self.stages else 0
        w.writerow(["total", self.total_macs, first, last, f"{self.sparsity:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        sel = self["sc.select"]
        return (f"MACs={self.total_macs} (FLOPs~{2 * self.total_macs / 1e9:.4f}G) "
                f"N={sel.tokens_in} K={sel.tokens_out} sparsity={100 * sel.sparsity:.1f}% "
                f"attn_scores={self.macs('sc.attn_scores')}")


def attention_macs(K: int, D: int, layers: int = 1) -> Tuple[int, int]:
    """(projection MACs, score+mix MACs) of ``layers`` attention layers over K tokens."""
    if K < 1:
        raise ValidationError("K must be >= 1")
    return layers * 4 * K * D * D, layers * 2 * K * K * D


def _conv_out(n: int) -> int:
    return (n + 1) // 2  # 3x3, stride 2, padding 1


def count_ops(cfg, height: int, width: int, K: Optional[int] = None) -> OpCountReport:
    """Analytic per-sample MAC counts for a pipeline configuration.

    ``K`` defaults to the fixed-K override or, failing that, to the token
    count after grouping (no sparsity).
    """
    from .encoder import branch_widths

    T = cfg.data.timesteps
    st, sg, sc = cfg.sten, cfg.stsg, cfg.sc
    rep = OpCountReport()
    c_in, h, w, stem = 2, height, width, 0
    for _ in range(st.stages):
        h, w = _conv_out(h), _conv_out(w)
        stem += T * st.stem_channels * h * w * c_in * 9
        c_in = st.stem_channels
    C = c_in
    p = st.patch
    if h % p or w % p:
        raise ValidationError(f"patch {p} does not divide token grid {h}x{w}")
    n_cells = h * w
    n_grid = (h // p) * (w // p)
    da, db, dc = branch_widths(st.dim)
    D = st.dim
    N = sg.n_target or n_grid
    if K is None:
        K = sg.fixed_k or N
    if not 1 <= K <= N:
        raise ValidationError(f"K={K} outside [1, N={N}]")
    hid = sg.hidden
    proj, scores = attention_macs(K, D, sc.layers)
    rows = [
        ("sten.stem", stem, n_cells, n_cells),
        ("sten.branch_a", T * n_cells * C * da, n_cells, n_cells),
        ("sten.branch_b", T * n_cells * C * 9 * db, n_cells, n_cells),
        ("sten.branch_c", T * C * dc, n_cells, n_cells),
        ("sten.timing_attention", n_grid * 3, n_grid, n_grid),
        ("msp.proj", sum(4 * n_grid * d * d for d in (da, db, dc)), n_grid, n_grid),
        ("msp.attn", sum(2 * n_grid * n_grid * d for d in (da, db, dc)), n_grid, n_grid),
        ("stsg.spatial", n_grid * 25, n_grid, n_grid),
        ("stsg.group", 0, n_grid, N),
        ("stsg.predictor", 3 * hid + hid, N, N),
        ("stsg.fusion", N * (3 * hid + hid), N, N),
        ("sc.priority", N * 4, N, N),
        ("sc.select", 0, N, K),
        ("sc.attn_proj", proj, K, K),
        ("sc.attn_scores", scores, K, K),
        ("sc.ffn", sc.layers * 2 * K * D * sc.ffn, K, K),
        ("sc.head", D * sc.classes, K, K),
    ]
    rep.stages = [StageCount(*r) for r in rows]
    return rep


def loglog_slope(ks, macs) -> float:
    """Least-squares slope of log(macs) against log(k); NaN for fewer than two points."""
    ks = np.asarray(ks, dtype=np.float64)
    macs = np.asarray(macs, dtype=np.float64)
    if len(np.unique(ks)) < 2:
        return float("nan")
    return float(np.polyfit(np.log(ks), np.log(macs), 1)[0])

"""
End-to-end network: encoder -> temporal bias -> grouping -> gating -> sparse classifier.

The forward pass works on a batch of binned spike frames. Everything up to
the gate is batched; the hard top-K cut and the attention stack run per
sample because K differs between samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
from torch import nn

from .classifier import (
    ClassifierHead,
    PriorityParams,
    SparseAttentionStack,
    classify,
    priority_scores,
    select_indices,
    sparse_attention_stack,
)
from .config import PipelineConfig
from .encoder import LIFPrior, SpikeEncoder, SpikeInfo, extract_cues, timing_attention
from .errors import FormatError, NumericError, ValidationError
from .hilif import FeedbackState, HILIFParams, feedback_adjust, hilif_records
from .kvfile import format_kv, parse_kv
from .ops import OpCounter
from .selection import (
    GateFactors,
    ScoreMLP,
    SparsityDecision,
    compute_k,
    fuse_scores,
    gate,
    group_indices,
    predict_sparsity,
    spatial_scores,
    straight_through_mask,
    topk_mask,
)
from .surrogate import SurrogateShape
from .temporal import TemporalBias


@dataclass
class ForwardResult:
    logits: torch.Tensor  # (B, classes)
    rho: torch.Tensor  # (B,)
    K: torch.Tensor  # (B,) long
    N: int
    cues: SpikeInfo  # grouped cues, (B, N)
    grid_cues: SpikeInfo  # cues on the token grid before grouping
    selected: List[torch.Tensor]  # per-sample token indices kept by the classifier
    decisions: List[SparsityDecision] = field(default_factory=list)
    stem_spikes: Optional[torch.Tensor] = None
    msp_attention: Optional[torch.Tensor] = None  # (B, N_grid) mean mass received
    sc_attention: List[torch.Tensor] = field(default_factory=list)
    gated: Optional[torch.Tensor] = None  # (B, N, D) gate output fed to the hard cut
    urgency: Optional[torch.Tensor] = None  # (B, N)

    @property
    def sparsity(self) -> torch.Tensor:
        return 1.0 - self.K.to(torch.float64) / self.N


class SpikeGateNet(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        seed = cfg.run.seed
        h = cfg.hilif
        prior = LIFPrior(h.mu_tau, h.sigma_tau, h.mu_vth, h.sigma_vth, h.reset_mode, h.v_reset)
        st = cfg.sten
        self.encoder = SpikeEncoder(2, st.stem_channels, st.stages, st.dim, prior=prior, seed=seed)
        m = cfg.msp
        self.msp = TemporalBias(self.encoder.widths, m.heads, m.alpha, m.beta, m.gamma,
                                m.ablate, seed)
        self.predictor = ScoreMLP(3, cfg.stsg.hidden, seed + 601, zero_output=True)
        self.fusion = ScoreMLP(3, cfg.stsg.hidden, seed + 607)
        self.gates = GateFactors(cfg.stsg.g_enh, cfg.stsg.g_sup)
        self.priority = PriorityParams()
        self.stack = SparseAttentionStack(st.dim, cfg.sc.layers, cfg.sc.heads, cfg.sc.ffn,
                                          cfg.sc.kappa, seed)
        self.head = ClassifierHead(st.dim, cfg.sc.classes, seed)
        self.surrogate = SurrogateShape(cfg.surrogate.kind, cfg.surrogate.width)
        self.feedback = FeedbackState(cfg.feedback.target_rate, cfg.feedback.decay,
                                      cfg.feedback.gain, cfg.feedback.target_rate)

    @property
    def ablate(self) -> frozenset:
        return self.msp.ablate

    def lif_layers(self) -> List[HILIFParams]:
        return self.encoder.lif_layers()

    @torch.no_grad()
    def clamp_(self) -> None:
        for lif in self.lif_layers():
            lif.clamp_()

    @torch.no_grad()
    def apply_feedback(self, observed_rate: float) -> None:
        fb = self.feedback
        for lif in self.lif_layers():
            _, new = feedback_adjust(lif, observed_rate, fb)
        self.feedback = new

    # ------------------------------------------------------------------ #

    def forward(self, frames: torch.Tensor, smooth: bool = False,
                counter: Optional[OpCounter] = None, fixed_k=None,
                record: bool = False) -> ForwardResult:
        """Classify ``(B, T, 2, H, W)`` spike frames.

        ``fixed_k`` (an int, or a ``(B,)`` tensor) bypasses the dynamic K policy.
        """
        if frames.dim() == 4:
            frames = frames.unsqueeze(0)
        if frames.dim() != 5 or frames.shape[2] != 2:
            raise ValidationError(f"expected (B, T, 2, H, W) frames, got {tuple(frames.shape)}")
        frames = frames.to(torch.float64)
        cfg, sur, ablate = self.cfg, self.surrogate, self.ablate
        p = cfg.sten.patch

        stem = self.encoder.stem(frames, sur, smooth, counter)
        grid_cues = extract_cues(stem, (p, p))
        f = self.encoder.branches(stem, sur, smooth, counter)
        if p > 1:
            B, N0, D = f.shape
            Hs, Ws = stem.shape[-2:]
            f = f.transpose(1, 2).reshape(B, D, Hs, Ws)
            f = nn.functional.avg_pool2d(f, p).flatten(2).transpose(1, 2)
        theta = self.encoder.theta * torch.tensor(
            [c not in ablate for c in ("rate", "timing", "interval")], dtype=torch.float64)
        f = timing_attention(f, grid_cues, theta, counter)

        tw = self.msp.weights(grid_cues)
        mixed, maps = self.msp(f, tw.w_combined, counter, return_attn=record)
        f = f + mixed
        Ht, Wt = grid_cues.grid
        s_spatial = spatial_scores(grid_cues.f_rate.reshape(-1, Ht, Wt), counter)
        s_msp = tw.w_combined

        cues = grid_cues
        n_grid = grid_cues.n_tokens
        N = cfg.stsg.n_target or n_grid
        if N != n_grid:
            idx = group_indices(grid_cues.f_rate, N)
            f = torch.gather(f, 1, idx.unsqueeze(-1).expand(*idx.shape, f.shape[-1]))
            cues = grid_cues.gather(idx)
            s_spatial = torch.gather(s_spatial, 1, idx)
            s_msp = torch.gather(s_msp, 1, idx)
        if counter is not None:
            counter.add("stsg.group", 0)

        f_input, rho = predict_sparsity(cues, self.predictor, ablate, counter)
        if isinstance(fixed_k, torch.Tensor):
            # per-sample K, e.g. held constant while probing the loss surface
            K = fixed_k.to(torch.long).expand(rho.shape)
            if K.min() < 1 or K.max() > N:
                raise ValidationError(f"fixed K outside [1, N={N}]")
        elif fixed_k or cfg.stsg.fixed_k:
            fixed_k = fixed_k or cfg.stsg.fixed_k
            if not 1 <= fixed_k <= N:
                raise ValidationError(f"fixed K={fixed_k} outside [1, N={N}]")
            K = torch.full_like(rho, fixed_k, dtype=torch.long)
        else:
            K = compute_k(rho, N, min(cfg.stsg.k_min, N))

        s_temporal = priority_scores(cues, ablate=ablate)
        s_comb = fuse_scores(s_spatial, s_msp, s_temporal, self.fusion, counter)
        mask = topk_mask(s_comb, K)
        m = straight_through_mask(s_comb, mask, K, sur, smooth)
        g = gate(f, m, self.gates.g_enh, self.gates.g_sup)

        u = self.priority(cues, ablate, counter)
        logits, selected, sc_maps = self.sparse_head(g, u, K, counter, record)

        res = ForwardResult(logits, rho, K, N, cues, grid_cues, selected)
        if record:
            res.gated = g.detach()
            res.urgency = u.detach()
            res.stem_spikes = stem.detach()
            res.sc_attention = sc_maps
            # mean attention mass each key token receives, over scales, heads and queries
            mass = torch.stack([a.mean(dim=(-3, -2)) for a in maps]).mean(0)
            res.msp_attention = mass.detach()
            for b in range(g.shape[0]):
                res.decisions.append(SparsityDecision(
                    f_input[b].detach(), float(rho[b].detach()), int(K[b]), s_spatial[b].detach(),
                    s_msp[b].detach(), s_temporal[b].detach(), s_comb[b].detach(),
                    mask[b].detach(),
                ))
        return res

    def sparse_head(self, g: torch.Tensor, u: torch.Tensor, K: torch.Tensor,
                    counter: Optional[OpCounter] = None, record: bool = False):
        """Hard top-K cut, attention stack and head, one sample at a time.

        Only rows picked by ``select_indices`` are read from ``g``.
        """
        logits, selected, maps = [], [], []
        for b in range(g.shape[0]):
            idx = select_indices(u[b], int(K[b]))
            if counter is not None:
                counter.add("sc.select", 0)
            out = sparse_attention_stack(g[b, idx], u[b, idx], self.stack, counter,
                                         return_attn=record)
            if record:
                out, a = out
                maps.append(a)
            logits.append(classify(out, self.head.weight, self.head.bias, counter))
            selected.append(idx)
        logits = torch.stack(logits)
        if not torch.isfinite(logits).all():
            raise NumericError("non-finite logits from the sparse classifier")
        return logits, selected, maps


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #


def checkpoint_records(model: SpikeGateNet) -> dict:
    rec = {f"config.{k}": v for k, v in model.cfg.to_records().items()}
    lif_names = set()
    for name, mod in model.named_modules():
        if isinstance(mod, HILIFParams):
            rec.update(hilif_records(mod, prefix=f"{name}.hilif"))
            lif_names.update({f"{name}.w", f"{name}.vth"})
    for name, p in model.named_parameters():
        if name in lif_names:
            continue
        flat = p.detach().reshape(-1).tolist()
        rec[f"param.{name}.shape"] = ",".join(str(s) for s in p.shape) or "scalar"
        rec.update({f"param.{name}.{i}": float(v) for i, v in enumerate(flat)})
    rec["feedback.ema"] = model.feedback.ema_activity
    return rec


def dump_checkpoint(model: SpikeGateNet) -> str:
    return format_kv(checkpoint_records(model), header="spikegate checkpoint")


def load_checkpoint(text: str, source: str = "<checkpoint>") -> SpikeGateNet:
    """Rebuild a model from :func:`dump_checkpoint` output; raises FormatError on damage."""
    from dataclasses import replace

    from .hilif import hilif_from_records

    rec = parse_kv(text, source)
    try:
        cfg = PipelineConfig.from_records(
            {k[len("config."):]: v for k, v in rec.items() if k.startswith("config.")})
    except ValidationError as exc:
        raise FormatError(f"{source}: bad embedded config: {exc}") from None
    model = SpikeGateNet(cfg)
    lif_names = set()
    with torch.no_grad():
        for name, mod in model.named_modules():
            if isinstance(mod, HILIFParams):
                loaded = hilif_from_records(rec, prefix=f"{name}.hilif")
                if loaded.channels != mod.channels:
                    raise FormatError(f"{source}: channel count mismatch for {name}")
                mod.w.copy_(loaded.w)
                mod.vth.copy_(loaded.vth)
                lif_names.update({f"{name}.w", f"{name}.vth"})
        for name, p in model.named_parameters():
            if name in lif_names:
                continue
            shape_key = f"param.{name}.shape"
            want = ",".join(str(s) for s in p.shape) or "scalar"
            if rec.get(shape_key) != want:
                raise FormatError(f"{source}: parameter {name!r} missing or has wrong shape")
            try:
                vals = [float(rec[f"param.{name}.{i}"]) for i in range(p.numel())]
            except KeyError as exc:
                raise FormatError(f"{source}: checkpoint is missing key {exc.args[0]!r}") from None
            except ValueError:
                raise FormatError(f"{source}: malformed value in parameter {name!r}") from None
            t = torch.tensor(vals, dtype=torch.float64).reshape(p.shape)
            if not torch.isfinite(t).all():
                raise FormatError(f"{source}: non-finite value in parameter {name!r}")
            p.copy_(t)
    if "feedback.ema" in rec:
        try:
            model.feedback = replace(model.feedback, ema_activity=float(rec["feedback.ema"]))
        except ValueError:
            raise FormatError(f"{source}: malformed feedback.ema") from None
    return model


def save_checkpoint(model: SpikeGateNet, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_checkpoint(model))


def read_checkpoint(path) -> SpikeGateNet:
    with open(path) as fh:
        return load_checkpoint(fh.read(), str(path))


def frames_tensor(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames)).to(torch.float64)

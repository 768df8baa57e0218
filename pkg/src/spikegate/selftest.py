"""
Fast invariant suite behind ``spikegate selftest``.

Every check compares the implementation against an independent oracle
(closed forms, brute-force sorting, finite differences) and returns a short
diagnostic string. Groups can be selected with ``--filter``.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .classifier import (
    SparseAttentionStack,
    classify,
    count_ops,
    hard_select,
    loglog_slope,
    select_indices,
    sparse_attention_stack,
)
from .config import PipelineConfig
from .errors import FormatError, SpikeGateError
from .hilif import HILIFParams, init_heterogeneous, run_sequence
from .ops import OpCounter
from .pipeline import SpikeGateNet, dump_checkpoint, load_checkpoint
from .selection import compute_k, gate, topk_mask
from .temporal import bias_attention

SWEEP = (16, 32, 64, 128)


@dataclass
class CheckResult:
    group: str
    name: str
    ok: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.group}.{self.name}: {self.detail} ({self.seconds:.2f}s)"


# --------------------------------------------------------------------------- #
# neuron
# --------------------------------------------------------------------------- #


def membrane_closed_form(pairs: int = 50, steps: int = 100, seed: int = 0) -> Tuple[bool, str]:
    """Sub-threshold trace against ``x (1 - (1 - tau_inv)^t)``."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, pairs)
    tau_inv = rng.uniform(0.02, 0.98, pairs)
    params = HILIFParams(torch.from_numpy(np.log(tau_inv / (1 - tau_inv))),
                         torch.full((pairs,), 1e9, dtype=torch.float64))
    inp = torch.from_numpy(x).view(1, pairs, 1, 1).expand(steps, pairs, 1, 1)
    spikes, trace = run_sequence(inp, params, record_trace=True)
    t = np.arange(1, steps + 1)[:, None]
    exact = x[None, :] * (1.0 - (1.0 - tau_inv[None, :]) ** t)
    err = float(np.abs(trace[:, :, 0, 0].detach().numpy() - exact).max())
    return err <= 1e-10 and not spikes.any(), f"max |v - closed form| = {err:.2e} over {pairs} pairs"


def homogeneous_reduction(C: int = 16, seed: int = 0) -> Tuple[bool, str]:
    params = init_heterogeneous(C, 2.0, 0.0, 1.0, 0.0, seed=seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(20, 1, 1, 3, 3, generator=gen, dtype=torch.float64).expand(20, 1, C, 3, 3) * 2.5
    s, v = run_sequence(x, params, record_trace=True)
    same = all(torch.equal(s[:, :, c], s[:, :, 0]) and torch.equal(v[:, :, c], v[:, :, 0])
               for c in range(C))
    return same and s.any().item(), f"{C} channels bit-identical: {same}"


def heterogeneous_stats(C: int = 10_000, seed: int = 0) -> Tuple[bool, str]:
    tau = init_heterogeneous(C, 2.0, 0.3, 1.0, 0.2, seed=seed).tau.detach().numpy()
    m, s = float(tau.mean()), float(tau.std())
    return abs(m - 2.0) <= 0.01 and abs(s - 0.3) <= 0.01, f"tau mean {m:.4f} std {s:.4f}"


# --------------------------------------------------------------------------- #
# selection
# --------------------------------------------------------------------------- #


def _oracle_topk(scores: Sequence[float], K: int) -> List[int]:
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:K])


def topk_oracle(max_n: int = 12) -> Tuple[bool, str]:
    """Every 0/1 score pattern up to ``max_n`` tokens and every K."""
    cases = 0
    for n in range(1, max_n + 1):
        pats = torch.tensor(list(itertools.product((0.0, 1.0), repeat=n)), dtype=torch.float64)
        for K in range(1, n + 1):
            masks = topk_mask(pats, K)
            for row, m in zip(pats.tolist(), masks):
                want = _oracle_topk(row, K)
                if torch.nonzero(m).flatten().tolist() != want:
                    return False, f"mask mismatch at scores={row} K={K}"
                cases += 1
        if n <= 8:
            for row in pats.tolist():
                u = torch.tensor(row, dtype=torch.float64)
                tokens = torch.arange(n, dtype=torch.float64).view(n, 1)
                for K in range(1, n + 1):
                    kept, idx = hard_select(tokens, u, K)
                    want = _oracle_topk(row, K)
                    if idx.tolist() != want or kept.flatten().tolist() != [float(i) for i in want]:
                        return False, f"hard_select mismatch at u={row} K={K}"
    return True, f"{cases} mask cases agree with sorted-index oracle"


def k_arithmetic() -> Tuple[bool, str]:
    got = (compute_k(0.25, 256, 16), compute_k(0.75, 256, 16), compute_k(0.99, 256, 16))
    return got == (192, 64, 16), f"K(0.25, 0.75, 0.99 | N=256) = {got}"


def gate_identities(seed: int = 0) -> Tuple[bool, str]:
    gen = torch.Generator().manual_seed(seed)
    f = torch.randn(3, 10, 5, generator=gen, dtype=torch.float64)
    mask = torch.rand(3, 10, generator=gen) < 0.5
    ident = torch.equal(gate(f, mask, 1.0, 1.0), f)
    zeroed = gate(f, mask, 2.0, 0.0)
    ok_zero = bool((zeroed[~mask] == 0).all()) and torch.equal(zeroed[mask], f[mask] * 2.0)
    return ident and ok_zero, f"identity {ident}, suppressed rows zero {ok_zero}"


# --------------------------------------------------------------------------- #
# attention
# --------------------------------------------------------------------------- #


def _plain_attention(x, wq, wk, wv, wo):
    q, k, v = x @ wq.T, x @ wk.T, x @ wv.T
    a = torch.softmax(q @ k.T / math.sqrt(x.shape[-1]), -1)
    return a @ v @ wo.T, a


def bias_shift_invariance(seed: int = 0) -> Tuple[bool, str]:
    gen = torch.Generator().manual_seed(seed)
    N, d = 12, 6
    x = torch.randn(N, d, generator=gen, dtype=torch.float64)
    ws = [torch.randn(d, d, generator=gen, dtype=torch.float64) / math.sqrt(d) for _ in range(4)]
    _, ref = _plain_attention(x, *ws)
    worst = 0.0
    for c in (1.0, 0.37, 1e-3):
        _, a = bias_attention(x, torch.full((N,), c, dtype=torch.float64), *ws, return_attn=True)
        worst = max(worst, float((a[0] - ref).abs().max()))
    return worst <= 1e-6, f"max deviation from unbiased attention {worst:.2e}"


def complexity_slope() -> Tuple[bool, str]:
    cfg = PipelineConfig().updated(stsg__n_target=256)
    analytic = [count_ops(cfg, 64, 64, K).macs("sc.attn_scores") for K in SWEEP]
    s_an = loglog_slope(SWEEP, analytic)
    stack = SparseAttentionStack(cfg.sten.dim, cfg.sc.layers, cfg.sc.heads, cfg.sc.ffn, seed=0)
    measured = []
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for K in SWEEP:
            c = OpCounter()
            x = torch.randn(K, cfg.sten.dim, generator=gen, dtype=torch.float64)
            sparse_attention_stack(x, torch.rand(K, generator=gen, dtype=torch.float64), stack, c)
            measured.append(c["sc.attn_scores"])
    s_in = loglog_slope(SWEEP, measured)
    ok = round(s_an, 3) == 2.0 and abs(s_in - 2.0) <= 0.05 and measured == analytic
    return ok, f"slope analytic {s_an:.3f}, instrumented {s_in:.3f}"


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #


def gradient_check_tiny(seed: int = 0) -> Tuple[bool, str]:
    from .train import gradient_check, tiny_batch, tiny_config

    model = SpikeGateNet(tiny_config(seed))
    n = sum(p.numel() for p in model.parameters())
    x, y = tiny_batch(seed)
    res = gradient_check(model, x, y)
    worst = max(res, key=lambda r: r.max_rel_error)
    ok = n <= 200 and all(r.ok() for r in res)
    return ok, f"{len(res)} blocks / {n} params, worst {worst.name} rel err {worst.max_rel_error:.1e}"


def hard_sparsity_isolation(seed: int = 0) -> Tuple[bool, str]:
    gen = torch.Generator().manual_seed(seed)
    N, D, K = 24, 8, 9
    stack = SparseAttentionStack(D, 2, 2, 16, seed=seed)
    head_w = torch.randn(3, D, generator=gen, dtype=torch.float64)
    head_b = torch.randn(3, generator=gen, dtype=torch.float64)
    g = torch.randn(N, D, generator=gen, dtype=torch.float64)
    u = torch.rand(N, generator=gen, dtype=torch.float64)

    def logits(feats):
        idx = select_indices(u, K)
        return classify(sparse_attention_stack(feats[idx], u[idx], stack), head_w, head_b)

    with torch.no_grad():
        base = logits(g)
        kept = set(select_indices(u, K).tolist())
        for n in range(N):
            if n in kept:
                continue
            h = g.clone()
            h[n] += 1e3 * torch.randn(D, generator=gen, dtype=torch.float64)
            if not torch.equal(logits(h), base):
                return False, f"dropped token {n} changed the logits"
    return True, f"{N - K} dropped tokens perturbed, logits unchanged"


def checkpoint_damage(seed: int = 0) -> Tuple[bool, str]:
    from .train import tiny_config

    model = SpikeGateNet(tiny_config(seed))
    text = dump_checkpoint(model)
    again = dump_checkpoint(load_checkpoint(text))
    if again != text:
        return False, "round trip changed the checkpoint"
    lines = text.splitlines()
    victim = next(i for i, ln in enumerate(lines) if ln.startswith("param."))
    broken = "\n".join(lines[:victim] + lines[victim + 1:])
    try:
        load_checkpoint(broken, "damaged")
    except FormatError as exc:
        return True, f"damage reported: {exc}"
    return False, "damaged checkpoint loaded silently"


CHECKS: Dict[str, List[Tuple[str, Callable[[], Tuple[bool, str]]]]] = {
    "hilif": [
        ("membrane_closed_form", membrane_closed_form),
        ("homogeneous_reduction", homogeneous_reduction),
        ("heterogeneous_stats", heterogeneous_stats),
    ],
    "topk": [("sort_oracle", topk_oracle), ("k_arithmetic", k_arithmetic)],
    "gate": [("identities", gate_identities)],
    "attention": [("bias_shift_invariance", bias_shift_invariance)],
    "ops": [("complexity_slope", complexity_slope)],
    "grad": [("finite_differences", gradient_check_tiny)],
    "sparsity": [("hard_isolation", hard_sparsity_isolation)],
    "checkpoint": [("damage_detected", checkpoint_damage)],
}


def run_checks(filters: Optional[Sequence[str]] = None,
               extra: Optional[List[Tuple[str, str, Callable[[], Tuple[bool, str]]]]] = None,
               report: Optional[Callable[[CheckResult], None]] = None) -> List[CheckResult]:
    """Run every check whose group (or ``group.name``) matches one of ``filters``."""
    todo = [(g, n, fn) for g, items in CHECKS.items() for n, fn in items]
    todo += list(extra or [])
    if filters:
        todo = [t for t in todo if any(f in (t[0], f"{t[0]}.{t[1]}") for f in filters)]
    out = []
    for group, name, fn in todo:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except (SpikeGateError, ArithmeticError, ValueError, RuntimeError) as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(group, name, bool(ok), detail, time.perf_counter() - t0)
        out.append(res)
        if report:
            report(res)
    return out

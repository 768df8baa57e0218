import math

import pytest
import torch

from spikegate.classifier import (
    ClassifierHead,
    PriorityParams,
    SparseAttentionStack,
    attention_macs,
    classify,
    count_ops,
    hard_select,
    loglog_slope,
    normalized_urgency,
    priority_scores,
    select_indices,
    sparse_attention_stack,
)
from spikegate.config import PipelineConfig
from spikegate.encoder import SpikeInfo
from spikegate.errors import ValidationError


def cues(t_first, t_interval, f_rate, burst=None, T=10):
    t = lambda v: torch.as_tensor(v, dtype=torch.float64)
    tf = t(t_first)
    return SpikeInfo(tf, t(t_interval), t(burst) if burst is not None else torch.zeros_like(tf),
                     t(f_rate), T, (1, tf.numel()))


class TestPriority:
    def test_silent_and_saturated(self):
        u = priority_scores(cues([1.0, 0.0], [10.0, 1.0], [0.0, 1.0]))
        assert u.tolist() == pytest.approx([0.0, 2.9], abs=1e-15)

    def test_earlier_wins(self):
        u = priority_scores(cues([0.2, 0.3], [4.0, 4.0], [0.4, 0.4]))
        assert float(u[0]) > float(u[1])

    def test_module_defaults_to_triad(self):
        c = cues([0.1, 0.7, 1.0], [2.0, 5.0, 10.0], [0.6, 0.2, 0.0], [0.5, 1.0, 0.0])
        got = PriorityParams()(c)
        assert torch.allclose(got, priority_scores(c), atol=1e-14)

    @pytest.mark.parametrize("cue,col", [("timing", 0), ("rate", 2)])
    def test_ablation_zeroes_term(self, cue, col):
        c = cues([0.1, 0.6], [2.0, 5.0], [0.6, 0.2])
        w = [1.0, 1.0, 1.0]
        w[col] = 0.0
        assert torch.allclose(priority_scores(c, ablate=[cue]), priority_scores(c, weights=w))


class TestHardSelect:
    u = torch.tensor([0.1, 0.9, 0.5, 0.9], dtype=torch.float64)

    @pytest.mark.parametrize("K,want", [(2, [1, 3]), (1, [1]), (3, [1, 2, 3]), (4, [0, 1, 2, 3])])
    def test_examples(self, K, want):
        rows = torch.arange(4, dtype=torch.float64).unsqueeze(-1)
        out, idx = hard_select(rows, self.u, K)
        assert idx.tolist() == want and out.flatten().tolist() == want

    def test_equal_urgency(self):
        assert select_indices(torch.ones(5), 2).tolist() == [0, 1]

    @pytest.mark.parametrize("K", [0, 5])
    def test_bad_k(self, K):
        with pytest.raises(ValidationError):
            hard_select(torch.zeros(4, 2), self.u, K)


class TestAttentionStack:
    def make(self, kappa, layers=1, heads=2, dim=4):
        return SparseAttentionStack(dim, layers=layers, heads=heads, ffn=6, kappa=kappa, seed=1)

    def test_kappa_zero_ignores_urgency(self, gen):
        st = self.make(0.0)
        x = torch.randn(5, 4, generator=gen, dtype=torch.float64)
        a = sparse_attention_stack(x, torch.rand(5, generator=gen, dtype=torch.float64), st)
        b = sparse_attention_stack(x, torch.zeros(5, dtype=torch.float64), st)
        assert torch.equal(a, b)

    def test_rows_are_distributions(self, gen):
        st = self.make(3.0, layers=2)
        x = torch.randn(3, 6, 4, generator=gen, dtype=torch.float64)
        out, maps = sparse_attention_stack(x, torch.rand(3, 6, generator=gen, dtype=torch.float64),
                                           st, return_attn=True)
        assert out.shape == x.shape and len(maps) == 2
        for m in maps:
            assert torch.allclose(m.sum(-1), torch.ones_like(m.sum(-1)), atol=1e-12)

    def test_large_kappa_sharpens(self, gen):
        x = torch.randn(6, 4, generator=gen, dtype=torch.float64)
        u = torch.tensor([1.0, 0, 0, 0, 0, 0], dtype=torch.float64)
        _, (a,) = sparse_attention_stack(x, u, self.make(1e4), return_attn=True)
        assert float(a[..., 0, :].max(-1).values.min().detach()) > 0.999

    def test_exact_tie_survives(self):
        st = self.make(50.0, heads=1)
        x = torch.ones(2, 4, dtype=torch.float64)
        _, (a,) = sparse_attention_stack(x, torch.tensor([2.0, 0.0], dtype=torch.float64), st,
                                         return_attn=True)
        assert torch.allclose(a, torch.full_like(a, 0.5), atol=0)

    def test_normalized_urgency(self):
        assert normalized_urgency(torch.tensor([1.0, 3.0, 2.0])).tolist() == [0.0, 1.0, 0.5]
        assert normalized_urgency(torch.tensor([2.0, 2.0])).tolist() == [0.0, 0.0]

    def test_invalid(self):
        with pytest.raises(ValidationError):
            SparseAttentionStack(6, heads=4)
        with pytest.raises(ValidationError):
            SparseAttentionStack(4, kappa=-1.0)


class TestClassify:
    def test_zero(self):
        z = torch.zeros(3, 4, dtype=torch.float64)
        assert not classify(z, torch.zeros(2, 4, dtype=torch.float64), torch.zeros(2, dtype=torch.float64)).any()

    def test_single_token_affine(self, gen):
        head = ClassifierHead(4, 3)
        x = torch.randn(1, 4, generator=gen, dtype=torch.float64)
        want = x[0] @ head.weight.T + head.bias
        assert torch.allclose(classify(x, head.weight, head.bias), want)

    def test_duplication_invariance(self, gen):
        head = ClassifierHead(4, 3)
        x = torch.randn(5, 4, generator=gen, dtype=torch.float64)
        a = classify(x, head.weight, head.bias)
        b = classify(torch.cat([x, x]), head.weight, head.bias)
        assert torch.allclose(a, b, atol=1e-14)


class TestOpCount:
    def test_reference_value(self):
        assert attention_macs(64, 32) == (4 * 64 * 32 ** 2, 262_144)

    @pytest.mark.parametrize("K", [1, 7, 64, 100])
    def test_doubling(self, K):
        assert attention_macs(2 * K, 16)[1] == 4 * attention_macs(K, 16)[1]

    def test_boundary(self):
        assert attention_macs(1, 32)[1] == 64
        with pytest.raises(ValidationError):
            attention_macs(0, 32)

    def test_report(self):
        cfg = PipelineConfig()
        rep = count_ops(cfg, 64, 64, K=48)
        assert rep["sc.select"].tokens_out == 48
        assert rep.macs("sc.attn_scores") == cfg.sc.layers * 2 * 48 * 48 * cfg.sten.dim
        assert rep.total_macs == sum(s.macs for s in rep.stages)
        lines = rep.to_csv().splitlines()
        assert lines[1] == "stage,macs,tokens_in,tokens_out,sparsity"
        assert lines[-1].startswith("total,")

    def test_slope(self):
        ks = [16, 32, 64, 128]
        assert loglog_slope(ks, [attention_macs(k, 8)[1] for k in ks]) == pytest.approx(2.0, abs=1e-12)
        assert math.isnan(loglog_slope([8, 8], [1, 2]))

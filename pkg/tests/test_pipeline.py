import pytest
import torch

from spikegate.classifier import count_ops
from spikegate.errors import FormatError
from spikegate.ops import OpCounter
from spikegate.pipeline import SpikeGateNet, dump_checkpoint, load_checkpoint, read_checkpoint, save_checkpoint
from spikegate.train import desk_config, tiny_batch, tiny_config


@pytest.fixture(scope="module")
def model():
    return SpikeGateNet(desk_config(seed=3))


@pytest.fixture(scope="module")
def frames():
    return tiny_batch(seed=5, B=3, T=10, H=16, W=16)[0]


class TestForward:
    def test_shapes_and_bounds(self, model, frames):
        with torch.no_grad():
            res = model(frames)
        cfg = model.cfg
        assert res.logits.shape == (3, 2)
        assert res.N == 64
        assert bool(((res.K >= cfg.stsg.k_min) & (res.K <= res.N)).all())
        assert bool(((res.rho > 0) & (res.rho < 1)).all())
        for k, idx in zip(res.K.tolist(), res.selected):
            assert len(idx) == k and torch.equal(idx, idx.sort().values)

    def test_fresh_model_rounds_half_up(self, model, frames):
        # zero-output predictor: rho = 0.5, K = floor(64 * 0.5 + 0.5) = 32
        with torch.no_grad():
            assert model(frames).K.tolist() == [32, 32, 32]

    @pytest.mark.parametrize("k", [4, 17, 64])
    def test_fixed_k(self, model, frames, k):
        with torch.no_grad():
            res = model(frames, fixed_k=k)
        assert res.K.tolist() == [k] * 3
        assert res.sparsity.tolist() == pytest.approx([1 - k / 64] * 3)

    def test_deterministic(self, frames):
        a = SpikeGateNet(desk_config(seed=1))
        b = SpikeGateNet(desk_config(seed=1))
        with torch.no_grad():
            assert torch.equal(a(frames).logits, b(frames).logits)

    def test_counter_matches_analytic(self, model, frames):
        counter = OpCounter()
        with torch.no_grad():
            res = model(frames[:1], counter=counter, fixed_k=20)
        rep = count_ops(model.cfg, 16, 16, K=20)
        for stage in rep.stages:
            assert counter.macs.get(stage.stage, 0) == stage.macs, stage.stage
        assert int(res.K) == 20

    def test_record_fills_maps(self, model, frames):
        with torch.no_grad():
            res = model(frames, record=True)
        assert res.stem_spikes is not None and res.msp_attention.shape == (3, 64)
        assert len(res.decisions) == 3
        assert int(res.decisions[0].mask.sum()) == int(res.K[0])


class TestCheckpoint:
    def test_round_trip(self, tmp_path, frames):
        m = SpikeGateNet(tiny_config(seed=2))
        with torch.no_grad():
            for p in m.parameters():
                p.add_(0.01 * torch.randn_like(p))
        path = tmp_path / "ck.kv"
        save_checkpoint(m, path)
        m2 = read_checkpoint(path)
        x = tiny_batch(seed=1)[0]
        with torch.no_grad():
            assert torch.equal(m(x).logits, m2(x).logits)
        assert dump_checkpoint(m2) == dump_checkpoint(m)

    @pytest.mark.parametrize("damage", ["drop_param", "bad_float", "bad_config", "nan"])
    def test_damage(self, damage):
        text = dump_checkpoint(SpikeGateNet(tiny_config()))
        lines = text.splitlines()
        i = next(j for j, ln in enumerate(lines) if ln.startswith("param.head.weight.0="))
        if damage == "drop_param":
            del lines[i]
        elif damage == "bad_float":
            lines[i] = "param.head.weight.0=zero"
        elif damage == "nan":
            lines[i] = "param.head.weight.0=nan"
        else:
            lines = [ln if not ln.startswith("config.sten.dim=") else "config.sten.dim=3" for ln in lines]
        with pytest.raises(FormatError):
            load_checkpoint("\n".join(lines))

"""
Synthetic temporal tasks, surrogate-gradient training and the finite-difference check.

Each task is binary and built from flickering blobs so that exactly one cue
family separates the classes:

* ``early-vs-late``: the same three-flash pattern starts in the first or the
  second half of the window (only ``t_first`` moves).
* ``burst-vs-regular``: three flashes with inter-flash gap 1 or 3 bins, same
  onset and event count (``t_interval``/``t_burst`` move).
* ``dense-vs-sparse``: four faint flashes against two bright ones, same
  onset, gap and expected event count (``f_rate`` moves).

Two anchor events in the top-left pixel at the first and last microsecond
pin every sample's binning window to the same grid, and the last
``QUIET_BINS`` bins never hold a flash.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .config import TASKS, PipelineConfig
from .errors import NumericError, ValidationError
from .events import OFF, EventStream, bin_to_frames, synth_flicker, synth_noise
from .pipeline import ForwardResult, SpikeGateNet, frames_tensor

SENSOR = (16, 16)
DURATION_US = 800_000
NOISE_RATE = 0.25  # background events / pixel / second
# Bins left silent at the end of every window so that trailing membrane
# activity is never cut off more for one class than the other.
QUIET_BINS = 2

HISTORY_FIELDS = ("epoch", "split", "loss", "accuracy", "mean_rho", "mean_K")


# --------------------------------------------------------------------------- #
# Tasks
# --------------------------------------------------------------------------- #


def _flashes(task: str, label: int, T: int, rng: np.random.Generator) -> Tuple[List[int], np.ndarray]:
    """Bin index and pixel fill probability of every flash for one sample.

    Fills vary flash to flash so that summed intensity is a poor proxy for
    the class; dense-vs-sparse also matches the expected event count.
    """
    if T < 8:
        raise ValidationError(f"synthetic tasks need at least 8 timesteps, got {T}")
    last = T - 1 - QUIET_BINS  # latest bin any flash may use
    if task == "early-vs-late":
        lo, hi = (0, max(0, T // 8)) if label == 0 else (T // 2 - 1, last - 2)
        s = int(rng.integers(lo, hi + 1))
        return [s, s + 1, s + 2], rng.uniform(0.4, 1.0, 3)
    if task == "burst-vs-regular":
        gap = 1 if label == 0 else 3
        s = int(rng.integers(0, last - 6 + 1))
        return [s, s + gap, s + 2 * gap], rng.uniform(0.4, 1.0, 3)
    if task == "dense-vs-sparse":
        s = int(rng.integers(0, last - 3 + 1))
        if label == 0:
            return [s, s + 1, s + 2, s + 3], rng.uniform(0.35, 0.65, 4)
        return [s, s + 1], rng.uniform(0.8, 1.0, 2)
    raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")


def make_sample(task: str, label: int, T: int, seed: int,
                geometry: Tuple[int, int] = SENSOR, duration_us: int = DURATION_US,
                noise_rate: float = NOISE_RATE) -> EventStream:
    """One labelled event stream for ``task``."""
    rng = np.random.default_rng(seed)
    width, height = geometry
    bins, fills = _flashes(task, label, T, rng)
    bw, bh = (int(v) for v in rng.integers(3, 6, size=2))
    x0 = int(rng.integers(1, width - bw))
    y0 = int(rng.integers(1, height - bh))
    step = duration_us / T
    times = [int(step * (b + 0.5)) for b in bins]
    stream = synth_flicker(geometry, (x0, y0, bw, bh), times, fills, seed=int(rng.integers(2**31)))
    anchors = EventStream.from_events(width, height, [(0, 0, 0, OFF), (duration_us - 1, 0, 0, OFF)])
    stream = stream.merge(anchors)
    if noise_rate > 0:
        noise = synth_noise(geometry, noise_rate, duration_us / 1e6, int(rng.integers(2**31)))
        stream = stream.merge(noise)
    return stream


def make_dataset(task: str, n: int, seed: int, T: int, height: int = 0, width: int = 0,
                 geometry: Tuple[int, int] = SENSOR) -> Tuple[torch.Tensor, torch.Tensor]:
    """Balanced ``(frames (n, T, 2, H, W), labels (n,))`` for ``task``."""
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    labels = np.arange(n) % 2
    np.random.default_rng(seed).shuffle(labels)
    frames = []
    for i, y in enumerate(labels):
        s = make_sample(task, int(y), T, seed * 100_003 + i, geometry)
        frames.append(bin_to_frames(s, T, height or None, width or None))
    return frames_tensor(np.stack(frames)), torch.from_numpy(labels.astype(np.int64))


# --------------------------------------------------------------------------- #
# Loss and gradients
# --------------------------------------------------------------------------- #


def loss_fn(res: ForwardResult, labels: torch.Tensor, cfg: PipelineConfig) -> torch.Tensor:
    """Cross-entropy plus a quadratic pull of the mean predicted sparsity towards its target."""
    ce = F.cross_entropy(res.logits, labels)
    reg = (res.rho.mean() - cfg.train.sparsity_target) ** 2
    return ce + cfg.train.sparsity_weight * reg


def check_gradients(model: torch.nn.Module) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter block {name!r}")


def backward_pass(loss: torch.Tensor, model: torch.nn.Module) -> Dict[str, torch.Tensor]:
    """Gradients of ``loss`` for every parameter (zeros where the loss does not depend on it)."""
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss.detach())}")
    model.zero_grad(set_to_none=False)
    loss.backward()
    check_gradients(model)
    return {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
            for n, p in model.named_parameters()}


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    max_abs_grad: float
    entries: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def tiny_config(seed: int = 0, ablate: str = "") -> PipelineConfig:
    """A full pipeline with well under 200 parameters, for gradient checks."""
    return PipelineConfig().updated(
        data__timesteps=4, sten__stages=1, sten__stem_channels=1, sten__dim=4,
        stsg__k_min=2, stsg__n_target=0, stsg__hidden=2,
        sc__layers=1, sc__heads=1, sc__ffn=1, sc__classes=2,
        msp__ablate=ablate, run__seed=seed,
    )


def tiny_batch(seed: int = 0, B: int = 2, T: int = 4, H: int = 6, W: int = 6):
    gen = torch.Generator().manual_seed(seed)
    frames = (torch.rand(B, T, 2, H, W, generator=gen) < 0.35).to(torch.float64)
    labels = torch.arange(B) % 2
    return frames, labels


def gradient_check(model: SpikeGateNet, frames: torch.Tensor, labels: torch.Tensor,
                   h: float = 1e-4, floor: float = 1e-6) -> List[GradCheckResult]:
    """Central differences of the surrogate-smoothed loss against autograd, per parameter block.

    Relative error per entry is ``|g - g_fd| / max(|g|, |g_fd|, floor)``.
    """
    cfg = model.cfg
    with torch.no_grad():
        K = model(frames, smooth=True).K  # integer-valued: zero derivative almost everywhere

    def loss_at() -> torch.Tensor:
        return loss_fn(model(frames, smooth=True, fixed_k=K), labels, cfg)

    grads = backward_pass(loss_at(), model)
    out = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = grads[name].reshape(-1)
            flat = p.view(-1)
            worst = 0.0
            for i in range(flat.numel()):
                keep = float(flat[i])
                flat[i] = keep + h
                up = float(loss_at())
                flat[i] = keep - h
                down = float(loss_at())
                flat[i] = keep
                fd = (up - down) / (2 * h)
                an = float(g[i])
                if not math.isfinite(fd):
                    raise NumericError(f"non-finite finite difference in {name!r}[{i}]")
                worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), floor))
            out.append(GradCheckResult(name, worst, float(g.abs().max()), flat.numel()))
    return out


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float
    mean_rho: float
    mean_K: float

    def row(self):
        return (self.epoch, self.split, repr(self.loss), repr(self.accuracy),
                repr(self.mean_rho), repr(self.mean_K))


@dataclass
class TrainResult:
    model: SpikeGateNet
    history: List[EpochMetrics] = field(default_factory=list)

    def final(self, split: str = "test") -> EpochMetrics:
        return [m for m in self.history if m.split == split][-1]

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for m in self.history:
            w.writerow(m.row())
        return buf.getvalue()


def evaluate(model: SpikeGateNet, frames: torch.Tensor, labels: torch.Tensor,
             batch_size: int = 32, fixed_k: Optional[int] = None) -> Tuple[float, float, float, float, float]:
    """``(loss, accuracy, mean_rho, mean_K, mean selected-token rate)`` without gradients."""
    tot = {"loss": 0.0, "acc": 0.0, "rho": 0.0, "K": 0.0, "rate": 0.0}
    n = len(labels)
    with torch.no_grad():
        for i in range(0, n, batch_size):
            x, y = frames[i:i + batch_size], labels[i:i + batch_size]
            res = model(x, fixed_k=fixed_k)
            b = len(y)
            tot["loss"] += float(loss_fn(res, y, model.cfg)) * b
            tot["acc"] += float((res.logits.argmax(-1) == y).sum())
            tot["rho"] += float(res.rho.sum())
            tot["K"] += float(res.K.sum())
            tot["rate"] += sum(float(res.cues.f_rate[j, idx].mean()) for j, idx in enumerate(res.selected))
    return tot["loss"] / n, tot["acc"] / n, tot["rho"] / n, tot["K"] / n, tot["rate"] / n


def train_synthetic(task: Optional[str], cfg: PipelineConfig,
                    data: Optional[Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]] = None,
                    fixed_k: Optional[int] = None,
                    log: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
    """Train a fresh :class:`SpikeGateNet` on ``task`` and record per-epoch metrics.

    ``data`` may supply pre-built ``(x_train, y_train, x_test, y_test)``;
    otherwise the task generator is called with seeds derived from
    ``cfg.run.seed``. The feedback controller runs between epochs only.
    """
    task = task or cfg.train.task
    cfg = cfg.updated(train__task=task)
    tr = cfg.train
    seed = cfg.run.seed
    torch.manual_seed(seed)
    if data is None:
        T = cfg.data.timesteps
        xtr, ytr = make_dataset(task, tr.train_samples, 2 * seed + 1, T, cfg.data.height, cfg.data.width)
        xte, yte = make_dataset(task, tr.test_samples, 2 * seed + 2, T, cfg.data.height, cfg.data.width)
    else:
        xtr, ytr, xte, yte = data
    model = SpikeGateNet(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=tr.lr, weight_decay=tr.weight_decay)
    steps = tr.epochs * math.ceil(len(ytr) / tr.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    gen = torch.Generator().manual_seed(seed + 7)
    result = TrainResult(model)

    for epoch in range(1, tr.epochs + 1):
        model.train()
        order = torch.randperm(len(ytr), generator=gen)
        for i in range(0, len(ytr), tr.batch_size):
            idx = order[i:i + tr.batch_size]
            res = model(xtr[idx], fixed_k=fixed_k)
            loss = loss_fn(res, ytr[idx], cfg)
            if not torch.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}: loss {float(loss)}")
            opt.zero_grad()
            loss.backward()
            check_gradients(model)
            opt.step()
            sched.step()
            model.clamp_()
        model.eval()
        for split, x, y in (("train", xtr, ytr), ("test", xte, yte)):
            loss_v, acc, rho, K, rate = evaluate(model, x, y, fixed_k=fixed_k)
            m = EpochMetrics(epoch, split, loss_v, acc, rho, K)
            result.history.append(m)
            if log:
                log(m)
            if split == "train" and cfg.feedback.enabled:
                model.apply_feedback(rate)
    return result


def mean_sparsity(model: SpikeGateNet, frames: torch.Tensor, batch_size: int = 32,
                  fixed_k: Optional[int] = None) -> float:
    with torch.no_grad():
        vals = [model(frames[i:i + batch_size], fixed_k=fixed_k).sparsity
                for i in range(0, len(frames), batch_size)]
    return float(torch.cat(vals).mean())


def desk_config(task: str = "early-vs-late", seed: int = 0, **overrides) -> PipelineConfig:
    """Small pipeline used for the synthetic-task experiments."""
    base = dict(
        data__timesteps=10, sten__stages=1, sten__stem_channels=4, sten__dim=8,
        stsg__k_min=4, stsg__n_target=0, stsg__hidden=8,
        sc__layers=1, sc__heads=2, sc__ffn=16, sc__classes=2,
        train__task=task, train__epochs=20, train__batch_size=16,
        train__train_samples=160, train__test_samples=100, train__lr=0.01,
        run__seed=seed,
    )
    base.update(overrides)
    return PipelineConfig().updated(**base)

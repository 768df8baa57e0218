"""
``spikegate`` command line.

Exit codes: 0 success, 1 validation/format error, 2 runtime or numeric
error, 3 self-test failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .classifier import count_ops, loglog_slope
from .config import TASKS, PipelineConfig
from .encoder import extract_cues
from .errors import NumericError, SpikeGateError, ValidationError
from .events import (
    EventStream,
    bin_to_frames,
    read_event_file,
    synth_moving_bar,
    synth_noise,
    write_event_file,
)
from .imaging import to_gray, write_pgm
from .ops import OpCounter
from .pipeline import SpikeGateNet, frames_tensor, read_checkpoint, save_checkpoint

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
EVENT_SUFFIXES = (".spk", ".csv")


@contextlib.contextmanager
def stage(name: str):
    """Prefix errors raised inside the block with the stage that raised them."""
    try:
        yield
    except SpikeGateError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------- #
# shared setup
# --------------------------------------------------------------------------- #


def build_config(args) -> PipelineConfig:
    with stage("config"):
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ValidationError(f"--set expects key=value, got {item!r}")
            cfg.set(key.strip(), value.strip())
        if args.seed is not None:
            cfg.set("run.seed", args.seed)
        if args.out is not None:
            cfg.set("run.out", args.out)
        return cfg.validate()


def build_model(args, cfg: PipelineConfig) -> SpikeGateNet:
    if args.checkpoint:
        with stage("checkpoint"):
            model = read_checkpoint(args.checkpoint)
        return model
    with stage("model"):
        return SpikeGateNet(cfg)


def out_dir(cfg: PipelineConfig) -> Path:
    p = Path(cfg.run.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def load_frames(path, cfg: PipelineConfig) -> torch.Tensor:
    with stage("event_io"):
        stream = read_event_file(path)
        frames = bin_to_frames(stream, cfg.data.timesteps, cfg.data.height or None,
                               cfg.data.width or None)
    return frames_tensor(frames).unsqueeze(0)


def _fixed_k(args, cfg: PipelineConfig) -> Optional[int]:
    return args.fixed_k if args.fixed_k is not None else (cfg.stsg.fixed_k or None)


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = out_dir(cfg)
    geometry = (args.width, args.height)
    seed = cfg.run.seed
    suffix = ".csv" if args.format == "csv" else ".spk"
    labels = []
    with stage("event_io"):
        for i in range(args.count):
            s_seed = seed * 1_000_003 + i
            if args.kind == "moving-bar":
                rng = np.random.default_rng(s_seed)
                v = args.velocity if args.velocity is not None else float(rng.uniform(-40, 40))
                stream = synth_moving_bar(geometry, v, args.duration, args.noise_rate, s_seed)
            elif args.kind == "noise":
                stream = synth_noise(geometry, args.noise_rate, args.duration, s_seed)
            else:
                from .train import DURATION_US, make_sample

                y = i % 2
                stream = make_sample(args.kind, y, cfg.data.timesteps, s_seed, geometry,
                                     DURATION_US)
                labels.append((f"sample_{i:04d}{suffix}", y))
            write_event_file(out / f"sample_{i:04d}{suffix}", stream)
    if labels:
        (out / "labels.csv").write_text(_csv_text(("file", "label"), labels))
    print(f"wrote {args.count} {args.kind} streams to {out}")
    return EXIT_OK


def cmd_encode(args, cfg: PipelineConfig) -> int:
    model = build_model(args, cfg)
    cfg = model.cfg if args.checkpoint else cfg
    out = out_dir(cfg)
    x = load_frames(args.events, cfg)
    with torch.no_grad(), stage("sten"):
        spikes = model.encoder.stem(x)
        cues = extract_cues(spikes, (cfg.sten.patch, cfg.sten.patch))[0]
    rows = [(n, _fmt(cues.t_first[n]), _fmt(cues.t_interval[n]), _fmt(cues.t_burst[n]),
             _fmt(cues.f_rate[n])) for n in range(cues.n_tokens)]
    (out / "cues.csv").write_text(
        _csv_text(("token", "t_first", "t_interval", "t_burst", "f_rate"), rows))
    counts = spikes[0].sum(dim=(1, 2, 3))
    (out / "spike_counts.csv").write_text(
        _csv_text(("t", "spikes"), [(t, int(c)) for t, c in enumerate(counts)]))
    print(f"tokens={cues.n_tokens} grid={cues.grid[0]}x{cues.grid[1]} T={cues.T} "
          f"active={int((cues.f_rate > 0).sum())} spikes={int(counts.sum())}")
    return EXIT_OK


def cmd_infer(args, cfg: PipelineConfig) -> int:
    model = build_model(args, cfg)
    cfg = model.cfg if args.checkpoint else cfg
    out = out_dir(cfg)
    x = load_frames(args.events, cfg)
    fk = _fixed_k(args, cfg)
    counter = OpCounter()
    with torch.no_grad(), stage("pipeline"):
        res = model(x, counter=counter, fixed_k=fk, record=True)
    K, N = int(res.K[0]), res.N
    H, W = x.shape[-2:]
    with stage("ops"):
        report = count_ops(cfg, H, W, K)
    for s in report.stages:
        if counter[s.stage] != s.macs:
            raise NumericError(f"[ops] instrumented MACs for {s.stage} ({counter[s.stage]}) "
                               f"differ from the analytic count ({s.macs})")
    dec = res.decisions[0]
    (out / "scores.csv").write_text(_csv_text(
        ("token", "s_spatial", "s_msp", "s_temporal", "s_combined", "mask"),
        [(n, _fmt(a), _fmt(b), _fmt(c), _fmt(d), m) for n, a, b, c, d, m in dec.rows()]))
    sel = set(res.selected[0].tolist())
    (out / "selected.csv").write_text(_csv_text(
        ("token", "selected"), [(n, int(n in sel)) for n in range(N)]))
    (out / "ops.csv").write_text(report.to_csv())
    probs = torch.softmax(res.logits[0], -1)
    top = int(probs.argmax())
    print(f"class={top} p={float(probs[top]):.4f} rho={float(res.rho[0]):.4f} "
          f"K={K} N={N} sparsity={100 * (1 - K / N):.1f}% MACs={report.total_macs}")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    from .train import train_synthetic

    task = args.task or cfg.train.task
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    if args.epochs:
        cfg.set("train.epochs", args.epochs)
    out = out_dir(cfg)
    fk = _fixed_k(args, cfg)

    def log(m):
        if m.split == "test":
            print(f"epoch {m.epoch:3d} loss={m.loss:.4f} acc={m.accuracy:.3f} "
                  f"mean_rho={m.mean_rho:.3f} mean_K={m.mean_K:.1f}")

    with stage("train"):
        res = train_synthetic(task, cfg, fixed_k=fk, log=log)
    (out / "history.csv").write_text(res.history_csv())
    save_checkpoint(res.model, out / "checkpoint.kv")
    print(f"final test accuracy {res.final().accuracy:.3f}; wrote {out / 'checkpoint.kv'}")
    return EXIT_OK


def cmd_profile(args, cfg: PipelineConfig) -> int:
    model = build_model(args, cfg) if (args.samples or args.checkpoint) else None
    if model is not None and args.checkpoint:
        cfg = model.cfg
    H = cfg.data.height or args.height
    W = cfg.data.width or args.width
    ks = [int(k) for k in args.sweep.split(",") if k.strip()] if args.sweep else []
    with stage("ops"):
        rows = []
        for K in ks:
            rep = count_ops(cfg, H, W, K)
            rows.append((K, rep.macs("sc.attn_scores"), rep.total_macs, rep.sparsity))
    if rows:
        print(f"{'K':>6} {'attn_macs':>14} {'total_macs':>14} {'sparsity':>9}")
        for K, a, t, s in rows:
            print(f"{K:>6} {a:>14} {t:>14} {100 * s:>8.1f}%")
        slope = loglog_slope([r[0] for r in rows], [r[1] for r in rows])
        if slope != slope:
            print("warning: slope undefined (need at least two distinct K values)", file=sys.stderr)
            print("slope=undefined")
        else:
            print(f"slope={slope:.3f}")
        out = out_dir(cfg)
        (out / "profile.csv").write_text(_csv_text(
            ("K", "attn_macs", "total_macs", "sparsity"),
            [(K, a, t, f"{s:.6f}") for K, a, t, s in rows]))
    if args.samples:
        rng = np.random.default_rng(cfg.run.seed)
        vals = []
        with torch.no_grad(), stage("pipeline"):
            for i in range(args.samples):
                stream = synth_moving_bar((W, H), float(rng.uniform(-40, 40)), 0.5,
                                          args.noise_rate, int(rng.integers(2**31)))
                x = frames_tensor(bin_to_frames(stream, cfg.data.timesteps)).unsqueeze(0)
                vals.append(float(model(x, fixed_k=_fixed_k(args, cfg)).sparsity[0]))
        print(f"mean sparsity over {args.samples} samples: {100 * float(np.mean(vals)):.1f}%")
    if not rows and not args.samples:
        raise ValidationError("nothing to profile: give --sweep and/or --samples")
    return EXIT_OK


def dataset_files(path) -> List[Path]:
    p = Path(path)
    if not p.is_dir():
        raise ValidationError(f"dataset path {p} is not a directory")
    files = sorted(f for f in p.iterdir() if f.suffix in EVENT_SUFFIXES)
    if not files:
        raise ValidationError(f"dataset {p} holds no event files")
    return files


def temporal_variance(model: SpikeGateNet, frames: torch.Tensor, patch: int = 1):
    """Per-sample population variance across tokens of ``(t_first, t_interval)``."""
    with torch.no_grad():
        cues = extract_cues(model.encoder.stem(frames), (patch, patch))
    return (cues.t_first.var(-1, unbiased=False), cues.t_interval.var(-1, unbiased=False))


def cmd_variance(args, cfg: PipelineConfig) -> int:
    model = build_model(args, cfg)
    cfg = model.cfg if args.checkpoint else cfg
    files = dataset_files(args.dataset)
    vt, vi = [], []
    for f in files:
        x = load_frames(f, cfg)
        with stage("sten"):
            a, b = temporal_variance(model, x, cfg.sten.patch)
        vt.append(float(a[0]))
        vi.append(float(b[0]))
    print(f"samples={len(files)} timing_variance={np.mean(vt):.6f} "
          f"interval_variance={np.mean(vi):.6f}")
    return EXIT_OK


def cmd_dump_maps(args, cfg: PipelineConfig) -> int:
    model = build_model(args, cfg)
    cfg = model.cfg if args.checkpoint else cfg
    # the mask is drawn on the token grid, so grouping must not reorder tokens
    model.cfg = cfg.updated(stsg__n_target=0)
    out = out_dir(cfg)
    for path in args.events:
        x = load_frames(path, cfg)
        with torch.no_grad(), stage("pipeline"):
            res = model(x, fixed_k=_fixed_k(args, cfg), record=True)
        Ht, Wt = res.grid_cues.grid
        name = Path(path).stem
        rate = res.grid_cues.f_rate[0].reshape(Ht, Wt).numpy()
        write_pgm(out / f"{name}_rate.pgm", np.floor(rate * 255 + 0.5).astype(np.uint8))
        write_pgm(out / f"{name}_attention.pgm",
                  to_gray(res.msp_attention[0].reshape(Ht, Wt).numpy()))
        mask = res.decisions[0].mask.reshape(Ht, Wt).numpy()
        write_pgm(out / f"{name}_mask.pgm", np.where(mask, 255, 0).astype(np.uint8))
        counts = res.stem_spikes[0].sum(dim=(1, 2, 3))
        (out / f"{name}_spikes.csv").write_text(
            _csv_text(("t", "spikes"), [(t, int(c)) for t, c in enumerate(counts)]))
        print(f"{name}: grid={Ht}x{Wt} K={int(res.K[0])} maps written to {out}")
    return EXIT_OK


def cmd_selftest(args, cfg: PipelineConfig) -> int:
    from .selftest import run_checks

    extra = []
    if args.checkpoint:
        def load_given():
            m = read_checkpoint(args.checkpoint)
            return True, f"{args.checkpoint} loads ({sum(p.numel() for p in m.parameters())} params)"
        extra.append(("checkpoint", "load_given", load_given))
    results = run_checks(args.filter, extra, report=lambda r: print(r.line(), flush=True))
    if not results:
        print(f"no checks match filter {args.filter}")
        return EXIT_SELFTEST
    failed = [r for r in results if not r.ok]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s")
    return EXIT_SELFTEST if failed else EXIT_OK


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikegate", description=__doc__.strip().splitlines()[0])
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: run.out)")
    p.add_argument("--fixed-k", type=int, help="override the dynamic K policy")
    p.add_argument("--checkpoint", help="load model parameters from a checkpoint file")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic event streams")
    s.add_argument("--kind", default="moving-bar", choices=("moving-bar", "noise") + TASKS)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--duration", type=float, default=0.5, help="seconds")
    s.add_argument("--velocity", type=float, help="pixels per second (random if omitted)")
    s.add_argument("--noise-rate", type=float, default=0.0, help="events/pixel/second")
    s.add_argument("--format", choices=("spk", "csv"), default="spk")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("encode", help="stem spikes and temporal cues of one event file")
    s.add_argument("events")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("infer", help="classify one event file and dump scores and MACs")
    s.add_argument("events")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("train", help="train on a synthetic temporal task")
    s.add_argument("--task", choices=TASKS)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("profile", help="attention MAC scaling and achieved sparsity")
    s.add_argument("--sweep", help="comma-separated K values, e.g. 16,32,64,128")
    s.add_argument("--samples", type=int, default=0,
                   help="also run the dynamic policy on this many synthetic samples")
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--noise-rate", type=float, default=2.0)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("variance", help="first-spike and interval variance over a dataset")
    s.add_argument("dataset")
    s.set_defaults(func=cmd_variance)

    s = sub.add_parser("dump-maps", help="rate/attention/mask images and spike-count curves")
    s.add_argument("events", nargs="+")
    s.set_defaults(func=cmd_dump_maps)

    s = sub.add_parser("selftest", help="run the fast invariant suite")
    s.add_argument("--filter", action="append",
                   help="only run this check group (or group.name); repeatable")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        return args.func(args, cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SpikeGateError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

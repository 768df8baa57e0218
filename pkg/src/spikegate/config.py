"""
Pipeline configuration as namespaced flat keys (``section.field=value``).

Every section is a dataclass; a key's type is taken from its default.
Unknown keys are rejected and the assembled config is validated against the
preconditions of each stage.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict

from .errors import FormatError, ValidationError
from .kvfile import format_kv, parse_kv
from .surrogate import KINDS
from .temporal import parse_ablation

TASKS = ("early-vs-late", "burst-vs-regular", "dense-vs-sparse")


@dataclass
class DataConfig:
    timesteps: int = 16
    height: int = 0  # 0 keeps the sensor resolution
    width: int = 0


@dataclass
class HILIFConfig:
    mu_tau: float = 2.0
    sigma_tau: float = 0.3
    mu_vth: float = 1.0
    sigma_vth: float = 0.2
    reset_mode: str = "soft"
    v_reset: float = 0.0


@dataclass
class FeedbackConfig:
    enabled: bool = True
    decay: float = 0.9
    gain: float = 0.05
    target_rate: float = 0.2


@dataclass
class STENConfig:
    stages: int = 2
    stem_channels: int = 8
    dim: int = 32
    patch: int = 1


@dataclass
class MSPConfig:
    heads: int = 1
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1.0
    ablate: str = ""


@dataclass
class STSGConfig:
    k_min: int = 16
    n_target: int = 256  # 0 disables grouping
    hidden: int = 16
    g_enh: float = 1.5
    g_sup: float = 0.5
    fixed_k: int = 0  # 0 = dynamic policy


@dataclass
class SCConfig:
    layers: int = 2
    heads: int = 4
    ffn: int = 64
    kappa: float = 1.0
    classes: int = 11


@dataclass
class SurrogateConfig:
    kind: str = "rectangular"
    width: float = 0.5


@dataclass
class TrainConfig:
    task: str = "early-vs-late"
    lr: float = 0.01
    weight_decay: float = 0.01
    epochs: int = 12
    batch_size: int = 16
    train_samples: int = 160
    test_samples: int = 100
    sparsity_target: float = 0.654
    sparsity_weight: float = 5.0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    hilif: HILIFConfig = field(default_factory=HILIFConfig)
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)
    sten: STENConfig = field(default_factory=STENConfig)
    msp: MSPConfig = field(default_factory=MSPConfig)
    stsg: STSGConfig = field(default_factory=STSGConfig)
    sc: SCConfig = field(default_factory=SCConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    # ------------------------------------------------------------------ #

    def to_records(self) -> Dict[str, object]:
        out = {}
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                out[f"{sec.name}.{f.name}"] = getattr(obj, f.name)
        return out

    def dumps(self) -> str:
        return format_kv(self.to_records(), header="pipeline configuration")

    def set(self, key: str, value) -> None:
        """Assign one namespaced key, coercing strings to the field's type."""
        sec_name, _, name = key.partition(".")
        sec = getattr(self, sec_name, None) if sec_name in _SECTIONS else None
        if sec is None or name not in {f.name for f in dataclasses.fields(sec)}:
            raise ValidationError(f"unknown config key {key!r}")
        setattr(sec, name, _coerce(key, getattr(sec, name), value))

    def updated(self, **overrides) -> "PipelineConfig":
        """Copy with ``section__field=value`` overrides applied and validated."""
        cfg = PipelineConfig.from_records(self.to_records(), validate=False)
        for k, v in overrides.items():
            cfg.set(k.replace("__", "."), v)
        cfg.validate()
        return cfg

    @classmethod
    def from_records(cls, records: Dict[str, object], validate: bool = True) -> "PipelineConfig":
        cfg = cls()
        for key, value in records.items():
            cfg.set(key, value)
        if validate:
            cfg.validate()
        return cfg

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "PipelineConfig":
        return cls.from_records(parse_kv(text, source))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.loads(fh.read(), str(path))

    @property
    def ablate(self) -> frozenset:
        return parse_ablation(self.msp.ablate)

    def validate(self) -> "PipelineConfig":
        h, st, sg, sc = self.hilif, self.sten, self.stsg, self.sc
        checks = [
            (self.data.timesteps >= 1, "data.timesteps must be >= 1"),
            (self.data.height >= 0 and self.data.width >= 0, "data.height/width must be >= 0"),
            (h.mu_tau > 1.01, "hilif.mu_tau must exceed 1.01"),
            (h.sigma_tau >= 0 and h.sigma_vth >= 0, "hilif sigmas must be >= 0"),
            (h.mu_vth > 0, "hilif.mu_vth must be positive"),
            (h.reset_mode in ("hard", "soft"), "hilif.reset_mode must be hard or soft"),
            (0 < self.feedback.decay < 1, "feedback.decay must lie in (0, 1)"),
            (self.feedback.gain >= 0, "feedback.gain must be >= 0"),
            (0 < self.feedback.target_rate < 1, "feedback.target_rate must lie in (0, 1)"),
            (st.stages >= 0 and st.stem_channels >= 1, "sten.stages >= 0 and sten.stem_channels >= 1"),
            (st.dim >= 4, "sten.dim must be >= 4"),
            (st.patch >= 1, "sten.patch must be >= 1"),
            (self.msp.heads >= 1, "msp.heads must be >= 1"),
            (self.msp.alpha > 0 and self.msp.beta > 0, "msp.alpha and msp.beta must be positive"),
            (sg.k_min >= 1, "stsg.k_min must be >= 1"),
            (sg.n_target >= 0, "stsg.n_target must be >= 0"),
            (sg.n_target == 0 or sg.n_target >= sg.k_min, "stsg.n_target must be >= stsg.k_min"),
            (sg.hidden >= 1, "stsg.hidden must be >= 1"),
            (sg.g_enh > 1 and 0 < sg.g_sup < 1, "need stsg.g_enh > 1 and 0 < stsg.g_sup < 1"),
            (sg.fixed_k >= 0, "stsg.fixed_k must be >= 0"),
            (sg.fixed_k == 0 or sg.n_target == 0 or sg.fixed_k <= sg.n_target,
             "stsg.fixed_k exceeds stsg.n_target"),
            (sc.layers >= 1 and sc.heads >= 1 and sc.ffn >= 1, "sc.layers/heads/ffn must be >= 1"),
            (st.dim % sc.heads == 0, "sc.heads must divide sten.dim"),
            (sc.kappa >= 0, "sc.kappa must be >= 0"),
            (sc.classes >= 2, "sc.classes must be >= 2"),
            (self.surrogate.kind in KINDS, f"surrogate.kind must be one of {KINDS}"),
            (self.surrogate.width > 0, "surrogate.width must be positive"),
            (self.train.task in TASKS, f"train.task must be one of {TASKS}"),
            (self.train.lr > 0 and self.train.weight_decay >= 0, "train.lr > 0, weight_decay >= 0"),
            (self.train.epochs >= 1 and self.train.batch_size >= 1, "train.epochs/batch_size >= 1"),
            (self.train.train_samples >= 2 and self.train.test_samples >= 2,
             "train/test sample counts must be >= 2"),
            (0 < self.train.sparsity_target < 1, "train.sparsity_target must lie in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)
        parse_ablation(self.msp.ablate)
        from .encoder import branch_widths
        for d in branch_widths(st.dim):
            if d % self.msp.heads:
                raise ValidationError("msp.heads must divide every branch width")
        return self


_SECTIONS = {f.name for f in dataclasses.fields(PipelineConfig)}


def _coerce(key, default, value):
    if not isinstance(value, str):
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ValidationError(f"{key}: expected a boolean")
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if type(value) is not type(default):
            raise ValidationError(f"{key}: expected {type(default).__name__}, got {value!r}")
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise FormatError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return value

"""
Heterogeneous-initialized leaky integrate-and-fire (HI-LIF) neurons.

Each channel ``c`` owns a reparameterized time constant ``w[c]`` and a
threshold ``v_th[c]``; the leak factor is ``tau_inv = sigmoid(w)``, so the
implied ``tau = 1 + exp(-w)`` stays above 1 for any finite ``w``. One step::

    v    <- v + (x - v) * tau_inv
    s     = Theta(v - v_th)            (Theta(0) = 1)
    v    <- v_reset           if s and reset_mode == "hard"
    v    <- v - v_th          if s and reset_mode == "soft"

Parameters are per channel and broadcast over the spatial grid. The module
also carries the activity feedback controller that rescales thresholds
between passes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn

from .errors import FormatError, ValidationError
from .kvfile import format_kv, parse_kv
from .surrogate import SurrogateShape, heaviside

TAU_FLOOR = 1.01
VTH_FLOOR = 0.01
W_BOUND = 30.0
RESET_MODES = ("hard", "soft")


class HILIFParams(nn.Module):
    """Per-channel LIF parameters plus the priors they were drawn from."""

    def __init__(self, w: torch.Tensor, v_th: torch.Tensor, mu_tau: float = 2.0,
                 sigma_tau: float = 0.0, mu_vth: float = 1.0, sigma_vth: float = 0.0,
                 reset_mode: str = "soft", v_reset: float = 0.0):
        super().__init__()
        if reset_mode not in RESET_MODES:
            raise ValidationError(f"reset_mode must be one of {RESET_MODES}, got {reset_mode!r}")
        w = torch.as_tensor(w, dtype=torch.float64).reshape(-1)
        v_th = torch.as_tensor(v_th, dtype=torch.float64).reshape(-1)
        if w.shape != v_th.shape or w.numel() == 0:
            raise ValidationError("w and v_th must be non-empty vectors of equal length")
        if not torch.all(v_th > 0):
            raise ValidationError("thresholds must be positive")
        self.w = nn.Parameter(w.clone())
        self.vth = nn.Parameter(v_th.clone())
        self.mu_tau, self.sigma_tau = float(mu_tau), float(sigma_tau)
        self.mu_vth, self.sigma_vth = float(mu_vth), float(sigma_vth)
        self.reset_mode = reset_mode
        self.v_reset = float(v_reset)

    @property
    def channels(self) -> int:
        return self.w.numel()

    @property
    def tau_inv(self) -> torch.Tensor:
        return torch.sigmoid(self.w)

    @property
    def tau(self) -> torch.Tensor:
        return 1.0 + torch.exp(-self.w)

    @torch.no_grad()
    def clamp_(self) -> "HILIFParams":
        """Re-impose the threshold floor after an optimizer step.

        ``w`` is also bounded: past roughly |w| = 37 the float64 logistic
        rounds to exactly 0 or 1 and the open-interval guarantee is lost.
        """
        self.w.clamp_(-W_BOUND, W_BOUND)
        self.vth.clamp_(min=VTH_FLOOR)
        return self

    def extra_repr(self) -> str:
        return (f"C={self.channels}, tau~N({self.mu_tau}, {self.sigma_tau}^2), "
                f"vth~N({self.mu_vth}, {self.sigma_vth}^2), reset={self.reset_mode}")


def init_heterogeneous(C: int, mu_tau: float = 2.0, sigma_tau: float = 0.3,
                       mu_vth: float = 1.0, sigma_vth: float = 0.2,
                       reset_mode: str = "soft", seed: int = 0,
                       v_reset: float = 0.0) -> HILIFParams:
    """Draw per-channel time constants and thresholds from normal priors."""
    if int(C) != C or C <= 0:
        raise ValidationError(f"channel count must be a positive integer, got {C}")
    if not mu_tau > TAU_FLOOR:
        raise ValidationError(f"mu_tau must exceed {TAU_FLOOR}, got {mu_tau}")
    if sigma_tau < 0 or sigma_vth < 0:
        raise ValidationError("prior standard deviations must be non-negative")
    if not mu_vth > 0:
        raise ValidationError(f"mu_vth must be positive, got {mu_vth}")
    rng = np.random.default_rng(seed)
    tau_init = np.maximum(rng.normal(mu_tau, sigma_tau, size=int(C)), TAU_FLOOR)
    v_th = np.maximum(rng.normal(mu_vth, sigma_vth, size=int(C)), VTH_FLOOR)
    w = -np.log(tau_init - 1.0)
    return HILIFParams(torch.from_numpy(w), torch.from_numpy(v_th), mu_tau, sigma_tau,
                       mu_vth, sigma_vth, reset_mode, v_reset)


def step(v: torch.Tensor, x: torch.Tensor, params: HILIFParams,
         surrogate: Optional[SurrogateShape] = None,
         smooth: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """Advance membranes ``v`` by one timestep of input current ``x``.

    Both tensors are ``(..., C, H, W)``. Returns ``(spikes, v_next)``.
    """
    if v.shape != x.shape:
        raise ValidationError(f"state shape {tuple(v.shape)} != input shape {tuple(x.shape)}")
    if x.dim() < 3 or x.shape[-3] != params.channels:
        raise ValidationError(
            f"input must be (..., C={params.channels}, H, W), got {tuple(x.shape)}"
        )
    surrogate = surrogate or SurrogateShape()
    tau_inv = params.tau_inv.view(-1, 1, 1)
    vth = params.vth.view(-1, 1, 1)
    v = v + (x - v) * tau_inv
    s = heaviside(v - vth, surrogate, smooth)
    if params.reset_mode == "hard":
        v = v * (1.0 - s) + params.v_reset * s
    else:
        v = v - vth * s
    return s, v


def run_sequence(x: torch.Tensor, params: HILIFParams, surrogate: Optional[SurrogateShape] = None,
                 smooth: bool = False, record_trace: bool = False,
                 v0: Optional[torch.Tensor] = None):
    """Unroll :func:`step` over the leading time axis of ``x`` (``(T, ..., C, H, W)``).

    Membranes start at zero unless ``v0`` is given. Returns ``(spikes, trace)``
    where ``trace`` holds the post-reset membrane after every step, or ``None``
    unless ``record_trace`` is set.
    """
    if x.dim() < 4 or x.shape[0] < 1:
        raise ValidationError("expected a (T, ..., C, H, W) sequence with T >= 1")
    v = torch.zeros_like(x[0]) if v0 is None else v0
    spikes, trace = [], []
    for t in range(x.shape[0]):
        s, v = step(v, x[t], params, surrogate, smooth)
        spikes.append(s)
        if record_trace:
            trace.append(v)
    return torch.stack(spikes), (torch.stack(trace) if record_trace else None)


# --------------------------------------------------------------------------- #
# Activity feedback
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class FeedbackState:
    ema_activity: float = 0.2
    decay: float = 0.9
    gain: float = 0.05
    target_rate: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.ema_activity <= 1.0:
            raise ValidationError("ema_activity must lie in [0, 1]")
        if not 0.0 < self.decay < 1.0:
            raise ValidationError("decay must lie in (0, 1)")
        if self.gain < 0:
            raise ValidationError("gain must be >= 0")
        if not 0.0 < self.target_rate < 1.0:
            raise ValidationError("target_rate must lie in (0, 1)")


@torch.no_grad()
def feedback_adjust(params: HILIFParams, observed_rate: float,
                    fb: FeedbackState) -> Tuple[HILIFParams, FeedbackState]:
    """Fold ``observed_rate`` into the EMA and rescale every threshold.

    All channels share the factor ``1 + gain * (ema - target)``, so channel
    ordering is preserved and higher activity never lowers a threshold.
    Thresholds are updated in place.
    """
    if not 0.0 <= observed_rate <= 1.0:
        raise ValidationError(f"observed_rate must lie in [0, 1], got {observed_rate}")
    ema = fb.decay * fb.ema_activity + (1.0 - fb.decay) * observed_rate
    factor = 1.0 + fb.gain * (ema - fb.target_rate)
    if fb.gain != 0.0 and factor != 1.0:
        params.vth.mul_(factor).clamp_(min=VTH_FLOOR)
    return params, replace(fb, ema_activity=ema)


# --------------------------------------------------------------------------- #
# Checkpoint records
# --------------------------------------------------------------------------- #


def hilif_records(params: HILIFParams, prefix: str = "hilif") -> dict:
    rec = {
        f"{prefix}.channels": params.channels,
        f"{prefix}.mu_tau": params.mu_tau,
        f"{prefix}.sigma_tau": params.sigma_tau,
        f"{prefix}.mu_vth": params.mu_vth,
        f"{prefix}.sigma_vth": params.sigma_vth,
        f"{prefix}.reset_mode": params.reset_mode,
        f"{prefix}.v_reset": params.v_reset,
    }
    rec.update({f"{prefix}.w.{c}": float(v) for c, v in enumerate(params.w.tolist())})
    rec.update({f"{prefix}.vth.{c}": float(v) for c, v in enumerate(params.vth.tolist())})
    return rec


def hilif_from_records(rec: dict, prefix: str = "hilif") -> HILIFParams:
    try:
        C = int(rec[f"{prefix}.channels"])
        w = [float(rec[f"{prefix}.w.{c}"]) for c in range(C)]
        vth = [float(rec[f"{prefix}.vth.{c}"]) for c in range(C)]
        return HILIFParams(
            torch.tensor(w, dtype=torch.float64), torch.tensor(vth, dtype=torch.float64),
            float(rec[f"{prefix}.mu_tau"]), float(rec[f"{prefix}.sigma_tau"]),
            float(rec[f"{prefix}.mu_vth"]), float(rec[f"{prefix}.sigma_vth"]),
            rec[f"{prefix}.reset_mode"], float(rec[f"{prefix}.v_reset"]),
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise FormatError(f"checkpoint has a malformed value under {prefix!r}: {exc}") from None


def dump_hilif(params: HILIFParams) -> str:
    return format_kv(hilif_records(params), header="HI-LIF checkpoint")


def load_hilif(text: str) -> HILIFParams:
    return hilif_from_records(parse_kv(text))

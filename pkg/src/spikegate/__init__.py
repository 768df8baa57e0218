"""Event-driven spiking pipeline with cue-driven dynamic top-K sparse attention."""

from .config import PipelineConfig
from .errors import FormatError, NumericError, SpikeGateError, ValidationError
from .events import EventStream, bin_to_frames, parse_event_file, synth_moving_bar
from .pipeline import SpikeGateNet

__all__ = [
    "EventStream",
    "FormatError",
    "NumericError",
    "PipelineConfig",
    "SpikeGateError",
    "SpikeGateNet",
    "ValidationError",
    "bin_to_frames",
    "parse_event_file",
    "synth_moving_bar",
]

__version__ = "0.1.0"

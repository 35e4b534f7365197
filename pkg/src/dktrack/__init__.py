"""Dynamic template tracking and recognition with linear dynamical systems."""
from __future__ import annotations

from .geometry import TemplateGeometry
from .lds import LdsModel, identify, init_state, predict_template, simulate, transform_model
from .features import BinningSpec, KernelSpec, SoftHistogram
from .tracker import TrackerConfig, TrackResult, TrackState, solve_frame, track_sequence
from .baselines import EstimationResult, estimate_states, noise_bands
from .synth import ScenarioSpec, composite_sequence, random_model
from .recognition import TrainingSet, martin_distance, nn_classify, recognize

__all__ = [
    "TemplateGeometry",
    "LdsModel",
    "identify",
    "init_state",
    "predict_template",
    "simulate",
    "transform_model",
    "BinningSpec",
    "KernelSpec",
    "SoftHistogram",
    "TrackerConfig",
    "TrackResult",
    "TrackState",
    "solve_frame",
    "track_sequence",
    "EstimationResult",
    "estimate_states",
    "noise_bands",
    "ScenarioSpec",
    "composite_sequence",
    "random_model",
    "TrainingSet",
    "martin_distance",
    "nn_classify",
    "recognize",
]

__version__ = "0.1.0"

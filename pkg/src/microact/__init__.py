"""Action segmentation and skill grading for instrument-trajectory streams."""

from .config import ConfigError, PipelineConfig, load_config, save_config
from .pipeline import MissingInput, run_all
from .records import (
    ActionClass,
    Detection,
    InstrumentClass,
    Provenance,
    RefinedTrack,
    SkillLevel,
    SkillScore,
    TipTrajectory,
    TrackObservation,
    TruthInstance,
)

__version__ = "0.1.0"

__all__ = [
    "ActionClass",
    "ConfigError",
    "Detection",
    "InstrumentClass",
    "MissingInput",
    "PipelineConfig",
    "Provenance",
    "RefinedTrack",
    "SkillLevel",
    "SkillScore",
    "TipTrajectory",
    "TrackObservation",
    "TruthInstance",
    "load_config",
    "run_all",
    "save_config",
    "__version__",
]

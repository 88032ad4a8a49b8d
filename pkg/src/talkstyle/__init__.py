"""Style-adaptive talking-head motion: MoLoRA expression adaptation and
retrieval-driven pose generation, trained on synthetic corpora."""

from .errors import (
    ConfigError,
    DimensionError,
    InputError,
    LoadError,
    MetricError,
    StateError,
    TalkStyleError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DimensionError",
    "InputError",
    "LoadError",
    "MetricError",
    "StateError",
    "TalkStyleError",
    "TrainingError",
]

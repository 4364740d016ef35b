"""Temporal-graph EEG emotion models: feature construction, graph encoder, transformer, heads."""

from .model import EmT, EmTConfig, build_model, k_for_channels

__version__ = "0.1.0"

__all__ = ["EmT", "EmTConfig", "build_model", "k_for_channels", "__version__"]

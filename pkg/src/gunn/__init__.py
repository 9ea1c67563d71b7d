"""Gradually updated neural networks in NumPy."""

__version__ = "0.1.0"

from .arch import (NetworkSpec, GunnLayerConfig, build_gunn15, build_gunn18, build_gunn24, build_tiny_pair,
                   build_wide_gunn18, convert_mode, parameter_count)
from .engine import (ChannelPartition, GunnLayer, StageTape, UpdateUnit, gunn_backward, gunn_forward,
                     peak_activation_bytes, sunn_backward)
from .network import Network

__all__ = [
    "NetworkSpec", "GunnLayerConfig", "build_gunn15", "build_gunn18", "build_gunn24", "build_tiny_pair",
    "build_wide_gunn18", "convert_mode", "parameter_count", "ChannelPartition", "GunnLayer", "StageTape",
    "UpdateUnit", "gunn_backward", "gunn_forward", "peak_activation_bytes", "sunn_backward", "Network",
]

"""Fully convolutional DenseUNets for large histopathology images."""

from .netgraph import (
    MICRO_CONFIG,
    REFERENCE_CONFIG,
    Network,
    NetworkConfig,
    build_network,
    count_parameters,
    forward,
    gradient_check,
)

__version__ = "0.1.0"

__all__ = [
    "MICRO_CONFIG",
    "REFERENCE_CONFIG",
    "Network",
    "NetworkConfig",
    "build_network",
    "count_parameters",
    "forward",
    "gradient_check",
]

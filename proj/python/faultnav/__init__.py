"""Fault injection and mitigation for Q-learning navigation agents."""

from ._faultnav import (
    ConfigError,
    DataError,
    FixedFormat,
    GridWorld,
    config_reference,
    dequantize,
    flip_bit,
    quantize,
    run_campaign,
    stuck_bit,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "FixedFormat",
    "GridWorld",
    "config_reference",
    "dequantize",
    "flip_bit",
    "quantize",
    "run_campaign",
    "stuck_bit",
    "train",
]

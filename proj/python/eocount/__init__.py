"""Class-incremental object counting on synthetic scenes (native core)."""

from ._eocount import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    Model,
    config_text,
    downsample_density,
    evaluate,
    generate_sample,
    grad_check,
    mae,
    mse,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "FormatError",
    "Model",
    "config_text",
    "downsample_density",
    "evaluate",
    "generate_sample",
    "grad_check",
    "mae",
    "mse",
    "train",
]

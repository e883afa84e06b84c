"""Checkpoint-to-manifest exporter for Mamba-1 style models."""

__version__ = "0.1.0"

from .convert import ConversionReport, convert, verify
from .layout import ConversionMap, ConversionRule, build_conversion_map, infer_config
from .readers import CheckpointError, read_checkpoint

__all__ = [
    "CheckpointError",
    "ConversionMap",
    "ConversionReport",
    "ConversionRule",
    "build_conversion_map",
    "convert",
    "infer_config",
    "read_checkpoint",
    "verify",
]

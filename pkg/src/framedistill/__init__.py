"""Lidar student distillation from a 2D teacher: I/O, geometry, training and evaluation."""

from .errors import ConfigError, ConsistencyError, FormatError, FrameDistillError, TruncationError, ValidationError

__all__ = ["ConfigError", "ConsistencyError", "FormatError", "FrameDistillError",
           "TruncationError", "ValidationError"]
__version__ = "0.1.0"

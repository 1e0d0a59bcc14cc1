# -*- coding: utf-8 -*-
"""Exceptions and warnings for PyLime."""

__all__ = [
    "PyLimeException",
    "ShapeError",
    "GraphError",
    "NonFiniteGradientError",
    "NonFiniteLossError",
    "ConfigError",
    "KvBufferError",
    "VocabularyError",
    "GenerationError",
    "DatasetError",
    "ProbeError",
    "CheckpointError",
    "UsageError",
]

class PyLimeException(Exception):
    """Base class for custom exceptions."""
    pass

class ShapeError(PyLimeException, ValueError):
    """Exception when operand shapes are incompatible."""
    pass

class GraphError(PyLimeException):
    """Exception when a gradient graph is misused."""
    pass

class NonFiniteGradientError(PyLimeException):
    """Exception when an optimizer step is rejected because of NaN/inf gradients."""
    pass

class NonFiniteLossError(PyLimeException):
    """Exception when training produces a non-finite loss."""
    pass

class ConfigError(PyLimeException, ValueError):
    """Exception when a configuration is invalid."""
    pass

class KvBufferError(PyLimeException):
    """Exception when the key-value buffer is filled or read out of order."""
    pass

class VocabularyError(PyLimeException, IndexError):
    """Exception when a token or id is outside the vocabulary."""
    pass

class GenerationError(PyLimeException):
    """Exception when a synthetic sample cannot be generated."""
    pass

class DatasetError(PyLimeException):
    """Exception when a dataset is empty, malformed or does not fit."""
    pass

class ProbeError(PyLimeException):
    """Exception when a probing dataset is degenerate."""
    pass

class CheckpointError(PyLimeException):
    """Exception when a checkpoint file is invalid."""
    pass

class UsageError(PyLimeException):
    """Exception when command-line arguments are invalid."""
    pass

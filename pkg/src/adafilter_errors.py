"""
Exception hierarchy shared by every AdaFilter module.

Library code raises these; the front ends (CLI, MCP tools) turn them into
readable messages with format_error_message() in adafilter_tools.
"""

from typing import Optional


class AdaFilterError(Exception):
    """Base class for all AdaFilter errors."""


class ShapeError(AdaFilterError, ValueError):
    """A tensor or parameter has a shape the operation cannot accept."""


class GraphError(AdaFilterError, RuntimeError):
    """The computation record is unusable (non-scalar loss, missing grads, ...)."""


class NonFiniteLossError(GraphError):
    """Training produced NaN/Inf. Carries the first primitive that went non-finite."""

    def __init__(self, message: str, op_name: Optional[str] = None, step: Optional[int] = None):
        super().__init__(message)
        self.op_name = op_name
        self.step = step


class ConfigError(AdaFilterError, ValueError):
    """Configuration failed validation. `fields` lists 'path: message' lines."""

    def __init__(self, message: str, fields: Optional[list[str]] = None):
        super().__init__(message)
        self.fields = fields or []


class DatasetError(AdaFilterError):
    """Dataset files are missing, corrupt, or inconsistent with their manifest."""


class CheckpointError(AdaFilterError):
    """Checkpoint container is corrupt or does not match the model."""


class StrategyError(AdaFilterError, ValueError):
    """Unknown strategy or a strategy applied to the wrong kind of model."""


class ReportError(AdaFilterError):
    """A run directory lacks what a report needs (wrong strategy, missing dump, uneven curves)."""

"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations

from typing import Any, Optional


class SmileCNNError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SmileCNNError, ValueError):
    pass


class InvalidArgumentError(SmileCNNError, ValueError):
    pass


class ConfigError(SmileCNNError, ValueError):
    pass


class EmptyDatasetError(SmileCNNError, ValueError):
    pass


class IncompleteReportError(SmileCNNError, ValueError):
    pass


class ConsistencyError(SmileCNNError, RuntimeError):
    """Trace and network (or similar paired inputs) do not belong together."""


class ParseError(SmileCNNError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MalformedFileError(SmileCNNError, ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class DivergenceError(SmileCNNError, ArithmeticError):
    """Non-finite loss or gradient during training.

    `partial_report` is filled in by `optim.train` so callers can flush the
    epochs completed before the failure.
    """

    def __init__(
        self,
        message: str,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
        layer: Optional[str] = None,
        config_index: Optional[int] = None,
    ):
        self.epoch = epoch
        self.batch = batch
        self.layer = layer
        self.config_index = config_index
        self.partial_report: Any = None
        parts = [message]
        if config_index is not None:
            parts.append(f"config #{config_index}")
        if epoch is not None:
            parts.append(f"epoch {epoch}")
        if batch is not None:
            parts.append(f"batch {batch}")
        if layer is not None:
            parts.append(f"layer {layer}")
        super().__init__(" | ".join(parts))

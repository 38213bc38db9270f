class FuelexecError(Exception):
    """Base class for package errors."""


class ConvergenceError(FuelexecError):
    """A nonlinear solve or limit procedure failed to converge."""

    def __init__(self, message, node=None):
        super().__init__(message if node is None else f"{message} (node {node})")
        self.node = node


class MonotonicityError(FuelexecError):
    """A sequence of value fields that must increase did not."""


class ConfigError(FuelexecError, ValueError):
    pass

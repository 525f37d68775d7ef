"""
Exception hierarchy for the Stokes-Biot simulator.

Library modules raise these; only the command-line boundary (cli.main) catches
them and turns them into exit statuses.
"""

from typing import Optional


class SimulationError(Exception):
    """Base class for every error raised by the simulator."""


class ParameterError(SimulationError, ValueError):
    """Invalid or degenerate model, discretization or builder parameters."""


class GeometryError(SimulationError):
    """Invalid mesh geometry, e.g. an inverted triangle after a mapping."""

    def __init__(self, message: str, triangle: Optional[int] = None):
        super().__init__(message)
        self.triangle = triangle


class MeshParseError(SimulationError):
    """Malformed MESH v1 file."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SolverError(SimulationError):
    """Direct solver failure (singular pivot, non-finite solution)."""

    def __init__(self, message: str, pivot: Optional[int] = None, step: Optional[str] = None):
        if step is not None:
            message = f"{step}: {message}"
        super().__init__(message)
        self.pivot = pivot
        self.step = step


class SequencingError(SimulationError):
    """A sub-problem was assembled without the data of the preceding step."""


class UsageError(SimulationError):
    """An operation was called with inconsistent arguments."""


class ConfigError(SimulationError):
    """Invalid run configuration; carries the file and line when known."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(location + message)
        self.path = path
        self.line = line

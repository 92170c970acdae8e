"""
Shellflow Errors
================
Exception hierarchy shared by every module. Library code raises these; the
command-line runner turns them into a JSON line on stderr and exit code 1.
"""

from typing import Any, Optional

import numpy as np


class ShellflowError(Exception):
    """Base class for every error raised by shellflow."""

    def to_dict(self) -> dict:
        """Machine-readable form used by the CLI error channel."""
        return {"error": type(self).__name__, "message": str(self)}


# ============== Mesh ==============

class MeshParseError(ShellflowError):
    """Malformed OBJ record."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")

    def to_dict(self) -> dict:
        return {**super().to_dict(), "line": self.line}


class NonManifoldError(ShellflowError):
    """An edge is shared by more than two triangles."""

    def __init__(self, edge: tuple[int, int], count: int):
        self.edge = edge
        self.count = count
        super().__init__(f"edge {edge} is shared by {count} triangles")

    def to_dict(self) -> dict:
        return {**super().to_dict(), "edge": list(self.edge)}


class DegenerateTriangleError(ShellflowError):
    """Zero-area triangle or non-finite cotangent."""

    def __init__(self, triangle: int, detail: str = "zero area"):
        self.triangle = triangle
        super().__init__(f"triangle {triangle} is degenerate ({detail})")

    def to_dict(self) -> dict:
        return {**super().to_dict(), "triangle": self.triangle}


# ============== ACAP ==============

class SingularVertexError(ShellflowError):
    """The per-vertex normal matrix of the deformation-gradient fit is singular."""

    def __init__(self, vertex: int):
        self.vertex = vertex
        super().__init__(f"normal matrix of vertex {vertex} is singular")

    def to_dict(self) -> dict:
        return {**super().to_dict(), "vertex": self.vertex}


class DegenerateElementError(ShellflowError):
    """A deformation gradient is too close to singular for polar decomposition."""

    def __init__(self, vertex: int, ratio: float):
        self.vertex = vertex
        self.ratio = ratio
        super().__init__(f"deformation gradient of vertex {vertex} is near-singular (sigma_min/sigma_max={ratio:.3e})")

    def to_dict(self) -> dict:
        return {**super().to_dict(), "vertex": self.vertex, "ratio": self.ratio}


class SolverStateError(ShellflowError):
    """Poisson solver used before factorization or with a mismatched grasp set."""


class ShapeMismatchError(ShellflowError):
    """Array or tensor dimensions do not agree."""


# ============== Simulation / training ==============

class DivergenceError(ShellflowError):
    """A non-finite energy or loss was produced."""

    def __init__(self, message: str, diagnostics: Optional[dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)

    def to_dict(self) -> dict:
        return {**super().to_dict(), "diagnostics": self.diagnostics}


class ConvergenceError(ShellflowError):
    """Newton's method hit its iteration cap."""

    def __init__(self, iterations: int, residual: float, last_iterate: np.ndarray):
        self.iterations = iterations
        self.residual = residual
        self.last_iterate = last_iterate
        super().__init__(f"Newton did not converge in {iterations} iterations (residual {residual:.3e})")

    def to_dict(self) -> dict:
        return {**super().to_dict(), "iterations": self.iterations, "residual": self.residual}


class RolloutError(ShellflowError):
    """A simulation step failed inside a rollout."""

    def __init__(self, frame: int, cause: ShellflowError):
        self.frame = frame
        self.cause = cause
        super().__init__(f"frame {frame}: {cause}")

    def to_dict(self) -> dict:
        return {**super().to_dict(), "frame": self.frame, "cause": self.cause.to_dict()}


class UnrecordedForwardError(ShellflowError):
    """backward() was called on a value with no recorded forward graph."""


class DatasetFormatError(ShellflowError):
    """On-disk dataset or checkpoint does not match the expected format."""


class EnvironmentSettingError(ShellflowError):
    """An environment variable holds a value the toolkit cannot use."""

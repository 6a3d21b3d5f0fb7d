# ======================================================
# backend/errors.py
# Error hierarchy shared by every pipeline stage
#
# Library code raises; only main.py turns these into
# process exit codes:
#   1 → usage / config
#   2 → data
#   3 → numerical non-convergence
# ======================================================

from typing import Any, Optional


class TactileError(Exception):
    exit_code = 2


# ======================================================
# CONFIGURATION (exit 1)
# ======================================================

class ConfigError(TactileError):
    exit_code = 1

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = []
        if key:
            where.append(f"key '{key}'")
        if line:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class LightConfigError(ConfigError):
    """Light direction matrix is singular."""


class SingularLayoutError(ConfigError):
    """Spring layout cannot resist every load axis."""


# ======================================================
# DATA (exit 2)
# ======================================================

class DataError(TactileError):
    exit_code = 2


class ProjectionDomainError(DataError):
    """Point at or behind the camera plane."""


class DimensionMismatchError(DataError):
    pass


class OverSegmentationError(DataError):
    def __init__(self, kind: str, count: int, limit: int):
        self.kind = kind
        self.count = count
        self.limit = limit
        super().__init__(f"{kind} markers: {count} components exceed limit {limit}")


class PyramidError(DataError):
    pass


class DegenerateConfigurationError(DataError):
    """Image points collinear or otherwise unusable for a planar pose."""


class CalibrationError(DataError):
    def __init__(self, message: str, deficient_axes=()):
        self.deficient_axes = tuple(deficient_axes)
        if self.deficient_axes:
            message = f"{message}; deficient axes: {', '.join(self.deficient_axes)}"
        super().__init__(message)


class ScenarioError(DataError):
    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


class FeatureError(DataError):
    def __init__(self, message: str, frame: Optional[int] = None):
        self.frame = frame
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)


class TrainingError(DataError):
    pass


# ======================================================
# NUMERICAL (exit 3)
# ======================================================

class ConvergenceError(TactileError):
    exit_code = 3

    def __init__(self, message: str, best: Any = None, residual: Optional[float] = None):
        self.best = best
        self.residual = residual
        if residual is not None:
            message = f"{message} (residual={residual:.3e})"
        super().__init__(message)

# src/faceshield/errors.py
"""
Exception hierarchy for faceshield.

Every error raised on purpose by the package derives from FaceShieldError so the
CLI can map it to an exit code. ConfigError is the only one that means "usage".
"""

from __future__ import annotations

from typing import Any


class FaceShieldError(Exception):
    """Base class for all faceshield errors."""


class InputError(FaceShieldError):
    """Malformed image, box or tensor handed to a public operation."""


class ConfigError(FaceShieldError):
    """Unknown key, out-of-range value, or an impossible detector declaration."""


class NumericalError(FaceShieldError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message: str, payload: dict[str, Any] | None = None):
        super().__init__(message)
        self.payload = payload or {}


class PlacementError(FaceShieldError):
    """The scene generator could not place every face without overlap."""


class TrainingError(FaceShieldError):
    """Toy detector training diverged."""

    def __init__(self, message: str, epoch: int, loss_trace: list[float]):
        super().__init__(message)
        self.epoch = epoch
        self.loss_trace = list(loss_trace)


class AttackError(FaceShieldError):
    """The optimizer failed mid-run; the objective trace up to the failure is kept."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = list(trace)


class PropagationError(FaceShieldError):
    """A video anchor could not be attacked; rows already produced are kept."""

    def __init__(self, message: str, partial_report: list[dict[str, Any]]):
        super().__init__(message)
        self.partial_report = list(partial_report)

"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class SolverError(RuntimeError):
    """Nonlinear or linear solve failed (divergence, singular step, ...)."""


class SeparationViolation(SolverError):
    """Phase field left the admissible interval of a singular potential."""

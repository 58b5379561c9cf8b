"""Exception types shared across the package.

Every error carries a machine-readable payload so the command line layer can
emit a structured JSON object on stderr and map the failure to an exit code:
validation problems exit 2, estimation degeneracies exit 3, I/O failures 4.
"""

from __future__ import annotations


class StrataBoundsError(Exception):
    """Base class for package errors."""

    def __init__(self, message: str, **payload):
        super().__init__(message)
        self.payload = payload


class DataValidationError(StrataBoundsError):
    """Bad inputs: headers, schema, config values, malformed rows."""


class HeaderMismatch(DataValidationError):
    """Input file header does not match the declared schema."""


class ConfigError(DataValidationError):
    """An option or configuration value is out of its legal range."""


class NotUpgradeable(DataValidationError):
    """The student's track has no higher track, so no cutoff applies."""


class ScoreOutOfRange(DataValidationError):
    """Test score falls outside the legal score range."""


class EstimationError(StrataBoundsError):
    """Estimation failed on structurally valid input."""


class EmptyArm(EstimationError):
    """A required instrument arm has no records."""


class DegenerateDenominator(EstimationError):
    """A bound denominator is zero or negative; the ratio is undefined."""


class EmptyStratum(EstimationError):
    """A principal stratum has (numerically) no mass in the sample."""


class BootstrapFailure(EstimationError):
    """Every bootstrap replicate failed; no standard error available."""

########################
# Exception Hierarchy  #
########################

from typing import Optional


class AdaptiveInferenceError(Exception):
    """
    Base exception class for the adaptive-experiment inference toolkit.

    All custom exceptions raised by the package inherit from this class,
    allowing callers (and the command-line front end) to handle them uniformly.
    """
    pass


class ValidationError(AdaptiveInferenceError):
    """
    Raised when an experiment log or a single unit record fails validation.

    Carries the 1-based data row and the offending field when they are known,
    so a malformed file can be fixed at the source.
    """

    def __init__(self, message: str, row: Optional[int] = None, field: Optional[str] = None):
        self.row = row
        self.field = field
        location = []
        if row is not None:
            location.append(f"row {row}")
        if field is not None:
            location.append(f"field '{field}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)


class PlanError(AdaptiveInferenceError):
    """
    Raised when a block partition or scored set cannot be constructed.
    """
    pass


class NuisanceError(AdaptiveInferenceError):
    """
    Raised when an outcome regression cannot be fitted or is missing for a
    scored block.
    """
    pass


class ScoringError(AdaptiveInferenceError):
    """
    Raised when pseudo-outcomes cannot be computed, e.g. when the plan and the
    log disagree on the horizon.
    """
    pass


class InferenceError(AdaptiveInferenceError):
    """
    Raised when an estimate or interval is requested outside its domain
    (too few scored units, invalid level, non-positive fixed variance).
    """
    pass


class AuditError(AdaptiveInferenceError):
    """
    Raised when audit inputs are missing or unreadable. Failed checks are
    reported as verdicts, never as exceptions.
    """
    pass


class DesignError(AdaptiveInferenceError):
    """
    Raised for unknown simulation designs, invalid design parameters, or
    methods that are not defined for a design.
    """
    pass


class ConfigurationError(AdaptiveInferenceError):
    """
    Raised when the lab configuration is invalid.

    Triggered by invalid directory paths, non-positive replication or worker
    counts, or levels outside their admissible ranges.
    """
    pass


class ContractViolation(AdaptiveInferenceError):
    """
    Raised when an enforced logging contract has failing checks.

    Carries the verdicts so callers can render the evidence.
    """

    def __init__(self, message: str, verdicts=None):
        super().__init__(message)
        self.verdicts = list(verdicts or [])

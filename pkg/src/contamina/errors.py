"""Exception types shared across the toolkit.

Every error carries an ``exit_code`` so the command line layer can map
failures to its exit-code contract: 2 for input/config problems, 3 for
estimation problems, 4 for benchmark mismatches.
"""

from __future__ import annotations


class ContaminaError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 3


class DatasetError(ContaminaError):
    """Problems with an input table or its schema."""

    exit_code = 2


class MissingColumn(DatasetError):
    pass


class NonBinaryOutcome(DatasetError):
    pass


class SingletonCohort(DatasetError):
    pass


class EmptyDataset(DatasetError):
    pass


class ConstantColumn(DatasetError):
    """A column that must be standardized is constant within a cohort."""


class InvalidConfig(ContaminaError):
    exit_code = 2


class IoFailure(ContaminaError):
    exit_code = 2


class EstimationError(ContaminaError):
    exit_code = 3


class RankDeficient(EstimationError):
    pass


class InsufficientData(EstimationError):
    pass


class SingleCluster(EstimationError):
    pass


class WeakInstrument(EstimationError):
    pass


class NonpositiveVariance(EstimationError):
    pass


class LambdaOutOfRange(EstimationError):
    pass


class TooFewLags(EstimationError):
    pass


class DegreeTooHigh(EstimationError):
    pass


class ZeroBaseline(EstimationError):
    pass


class NoTruthColumns(EstimationError):
    pass


class UnsupportedDriftLaw(EstimationError):
    pass


class McReplicationError(EstimationError):
    """A Monte Carlo replication failed; carries the replication index."""

    def __init__(self, replication: int, message: str):
        super().__init__(f"replication {replication}: {message}")
        self.replication = replication


class MismatchBeyondTolerance(ContaminaError):
    exit_code = 4


class WeakInstrumentWarning(UserWarning):
    """First stage is usable but weak; estimates proceed."""


class NumericFallbackWarning(UserWarning):
    """Closed-form moments unavailable; large-N numeric moments substituted."""

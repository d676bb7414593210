"""Exception types shared across the package."""


class SpkBasisError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SpkBasisError):
    """Operand shapes do not compose."""


class DegenerateVector(SpkBasisError):
    """A vector involved in a cosine has norm below the guard threshold."""


class EmptyInput(SpkBasisError):
    """An operation received an empty array where at least one element is required."""


class NonFiniteEvaluation(SpkBasisError):
    """A function evaluation produced NaN or infinity."""


class EmptySpeaker(SpkBasisError):
    """A speaker required to have utterances in the batch has none."""


class InsufficientSpeakers(SpkBasisError):
    """The batch does not contain enough distinct speakers."""


class InvalidSpec(SpkBasisError):
    """A dataset specification violates its invariants."""


class InvalidPlan(SpkBasisError):
    """A batch plan violates its invariants or cannot be satisfied by the dataset."""


class InsufficientData(SpkBasisError):
    """Not enough utterances/pairs to build the requested trials or training set."""


class DegenerateTrials(SpkBasisError):
    """A trial list lacks target or impostor trials, or scores are unusable."""


class NonFiniteLoss(SpkBasisError):
    """Training produced a non-finite loss or gradient; the run is aborted."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ConfigInconsistency(SpkBasisError):
    """A run configuration is internally inconsistent."""

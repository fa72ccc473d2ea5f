"""Exception types shared across the package."""


class PerimemError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(PerimemError, ValueError):
    """Operand dimensions do not line up, or an operand is empty/non-finite."""


class ScheduleError(PerimemError, ValueError):
    """Invalid update-period schedule or expansion period."""


class VocabularyError(PerimemError, ValueError):
    """A categorical id falls outside the known vocabulary."""


class DataFormatError(PerimemError, ValueError):
    """A data file could not be parsed; the message names the offending line."""


class SamplingError(PerimemError, ValueError):
    """Negative sampling is impossible, e.g. a user clicked every known item."""


class TimestampError(PerimemError, ValueError):
    """An event arrived out of order for its user."""


class UnknownUserError(PerimemError, KeyError):
    """A query hit a user with no stored memory (cold start)."""

    def __str__(self) -> str:  # KeyError repr-quotes its arg, which is unreadable
        return self.args[0] if self.args else ""


class StoreError(PerimemError, ValueError):
    """A memory-store file is corrupt or structurally inconsistent."""


class StoreVersionError(StoreError):
    """A memory-store file was written by a different model version."""


class CheckpointError(PerimemError, ValueError):
    """A model checkpoint file is unreadable or has an unknown format version."""


class TrainingDivergedError(PerimemError, RuntimeError):
    """Training hit a non-finite loss; the message names the batch."""

"""
Exception types raised by the FACEflow modules.

All of them derive from the built-in exception the caller would otherwise expect, so code that
catches ``ValueError`` keeps working while the command line can still tell them apart.
"""


class ConformanceError(ValueError):
    """A tensor or object does not match the shape contract it is used under."""


class InvalidConfigError(ValueError):
    """A configuration value or run-config file is outside its schema."""


class InsufficientDataError(ValueError):
    """A dataset cannot satisfy the pairing rules of a training phase."""


class DatasetError(ValueError):
    """A frame directory could not be ingested."""


class NonFiniteLossError(RuntimeError):
    """
    Raised when a training step produces a NaN or infinite loss term.

    :ivar step: Global step counter at which the loss diverged.
    :ivar term: Name of the first loss term that was not finite.
    :ivar batch_indices: Indices of the samples in the batch with a non-finite total.
    """

    def __init__(self, step, term, batch_indices):
        self.step = step
        self.term = term
        self.batch_indices = list(batch_indices)
        super().__init__(f'Non-finite loss at step {step} in term "{term}" '
                         f'(batch indices {self.batch_indices})')


class CheckpointError(ValueError):
    """A checkpoint directory is missing, incomplete or inconsistent with its manifest."""

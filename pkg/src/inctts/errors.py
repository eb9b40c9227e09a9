"""Exception hierarchy.

Each class carries an ``exit_code`` so the CLI can map failures to
category-coded process exit statuses.
"""


class InctTSError(Exception):
    exit_code = 1


class ConfigError(InctTSError):
    exit_code = 2


class MissingArtifactError(InctTSError):
    """An upstream artifact (checkpoint, corpus) is absent."""

    exit_code = 3

    def __init__(self, path, producer):
        self.path = str(path)
        self.producer = producer
        super().__init__(f"missing {self.path}; run `inctts {producer}` first")


class TrainingError(InctTSError):
    exit_code = 4

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class DimensionError(InctTSError, ValueError):
    exit_code = 5


class VocabularyError(InctTSError, KeyError):
    exit_code = 5

    def __str__(self):
        return str(self.args[0]) if self.args else "vocabulary error"


class NumericError(InctTSError, FloatingPointError):
    exit_code = 6


class EmptyInputError(InctTSError, ValueError):
    exit_code = 5


class IncompleteBackwardError(InctTSError):
    """A trainable parameter reached the optimizer without a gradient."""

    exit_code = 6


class CheckpointError(InctTSError):
    exit_code = 3


class UndefinedSimilarityError(NumericError):
    """Cosine similarity with a zero vector."""

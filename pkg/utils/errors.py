"""Domain exceptions.

Each error derives from the builtin it naturally is, so callers that only
care about `KeyError` / `ValueError` / `RuntimeError` keep working.
"""


class MissingWordError(KeyError):
    """A word is absent from the word table."""

    def __init__(self, word: str) -> None:
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"word {self.word!r} is not in the word table"


class VocabError(ValueError):
    """Unknown relation name or out-of-range relation index."""


class ShapeError(ValueError):
    """Tensor or feature widths disagree."""


class BagStructureError(ValueError):
    """A batch violates the bag structure (empty bag, empty item, bad item index)."""


class EmptyCorpusError(ValueError):
    """Preprocessing left nothing to train or evaluate on."""


class ConfigError(ValueError):
    """A configuration is infeasible."""


class InputFormatError(ValueError):
    """A corpus, word-vector or alignment file does not parse."""

    def __init__(self, path: str, line: int, reason: str) -> None:
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class CheckpointError(ValueError):
    """A checkpoint file is malformed or of an unsupported version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, reason: str) -> None:
        super().__init__(f"diverged at step {step}: {reason}")
        self.step = step


class StageError(RuntimeError):
    """A pipeline stage (data, train, eval, checkpoint, ...) failed."""

    def __init__(self, stage: str, cause: Exception) -> None:
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause

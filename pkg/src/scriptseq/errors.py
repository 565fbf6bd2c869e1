"""Exception taxonomy for scriptseq.

Every error raised on purpose by the package derives from ScriptSeqError,
so callers (and the CLI) can distinguish our failures from genuine bugs.
"""


class ScriptSeqError(Exception):
    """Base class for all scriptseq errors."""


class ConfigError(ScriptSeqError):
    """Invalid configuration value or malformed config file."""


# --- events ---------------------------------------------------------------

class EmptyPredicate(ScriptSeqError):
    """Event predicate is empty or whitespace-only."""


class SchemaError(ScriptSeqError):
    """Malformed record in a dataset or grammar file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AnswerOutOfRange(ScriptSeqError):
    """answer index outside [0, number of candidates)."""


# --- verbalizer -----------------------------------------------------------

class EmptyCorpus(ScriptSeqError):
    """Vocabulary construction got an empty corpus."""


class IdOutOfRange(ScriptSeqError):
    """Token id outside the vocabulary."""


# --- corpus ---------------------------------------------------------------

class GrammarTooShort(ScriptSeqError):
    """No schema long enough to yield a full chain plus candidate."""


class PoolExhausted(ScriptSeqError):
    """Could not draw enough distinct negative candidates."""


# --- masking --------------------------------------------------------------

class TooFewEvents(ScriptSeqError):
    """Sequence too short to mask."""


class PlacementFailure(ScriptSeqError):
    """Non-overlapping span placement failed after bounded retries."""


class ArityMismatch(ScriptSeqError):
    """Mask slot count differs from target segment count."""


# --- model ----------------------------------------------------------------

class SequenceTooLong(ScriptSeqError):
    """Input longer than the model's positional table."""


class NonFiniteLoss(ScriptSeqError):
    """Forward pass produced NaN or Inf."""


class HeadMissing(ScriptSeqError):
    """Classifier head requested but the model has none."""


class CorruptCheckpoint(ScriptSeqError):
    """Checkpoint failed structural validation."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


# --- training / scoring ---------------------------------------------------

class NonFiniteGradient(ScriptSeqError):
    """Gradient contains NaN or Inf."""


class DegenerateScore(ScriptSeqError):
    """Correct-candidate score so close to 1 the complement term is undefined."""


class EmptyTarget(ScriptSeqError):
    """Target sequence has no scorable positions."""

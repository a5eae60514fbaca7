"""Exception hierarchy.

Errors split into three families, which the command line maps onto exit
codes: bad inputs (1), provider/transport failures (2) and violated
internal invariants (3).
"""


class DatalessIntentError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(DatalessIntentError, ValueError):
    """An argument or input record is malformed."""


class RecordError(InvalidInputError):
    """A record in a line-oriented input file is invalid.

    Carries the path and 1-based line number when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        prefix = ":".join(loc)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class MalformedRecordError(RecordError):
    pass


class UnknownLabelError(RecordError):
    def __init__(self, label, path=None, line=None):
        self.label = label
        super().__init__(f"unknown intent label {label!r}", path, line)


class DuplicateIdError(RecordError):
    def __init__(self, record_id, path=None, line=None):
        self.record_id = record_id
        super().__init__(f"duplicate id {record_id!r}", path, line)


class ConlluError(RecordError):
    """A CoNLL-U sentence is malformed (bad head, cycle, missing sent_id...)."""

    def __init__(self, message, path=None, line=None, sent_id=None):
        self.sent_id = sent_id
        if sent_id is not None:
            message = f"sentence {sent_id!r}: {message}"
        super().__init__(message, path, line)


class DegradedInputError(InvalidInputError):
    """Every component of a combined representation was absent or gated off."""

    def __init__(self, utterance_id):
        self.utterance_id = utterance_id
        super().__init__(
            f"utterance {utterance_id!r} has an all-zero combined representation"
        )


class ProviderError(DatalessIntentError):
    """An embedding or completion provider failed."""


class TransportError(ProviderError):
    """Network-level failure after the retry budget was spent."""


class MissingEmbeddingError(ProviderError):
    """A cache-only provider was asked for a text it has no vector for."""


class CacheCorruptionError(DatalessIntentError):
    """A cache file contradicts the provider contract (e.g. dimension)."""


class InvariantError(DatalessIntentError, AssertionError):
    """An internal consistency check failed."""

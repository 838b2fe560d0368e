"""Exception types shared across the package.

Each class maps to one failure contract so callers can match on type
instead of message text. The CLI translates them into exit codes:
2 for bad input or configuration, 3 for training divergence.
"""


class SpeechKgError(Exception):
    """Base class for all package errors."""


class CorpusError(SpeechKgError):
    """Malformed corpus input: bad JSONL, duplicate utterance ids."""


class EntityError(SpeechKgError):
    """Entity surface form unusable, e.g. empty after trimming."""


class LabelError(SpeechKgError):
    """Entity label outside the declared vocabulary."""


class ConfigError(SpeechKgError):
    """Invalid configuration value or combination."""


class ShapeError(SpeechKgError):
    """Tensor, graph, or attention-map dimension mismatch."""


class FormatError(SpeechKgError):
    """Malformed binary or JSONL artifact file."""


class MissingKeyError(SpeechKgError):
    """A required lookup key is absent."""


class MetricError(SpeechKgError):
    """Metric undefined for the given label distribution."""


class TrainingError(SpeechKgError):
    """Non-finite loss or gradient during optimization."""


class SamplingError(SpeechKgError):
    """Requested more samples than the population allows."""

"""Error taxonomy.

Two top-level families drive exit codes and HTTP status mapping:
ValidationError -> CLI exit 1 / HTTP 400, RuntimeFailure -> exit 2 / HTTP 500.
"""


class ValidationError(Exception):
    """Bad input, bad config, violated preconditions."""


class RuntimeFailure(Exception):
    """Work that started and could not complete."""


class ConfigError(ValidationError):
    pass


class ManifestError(ValidationError):
    pass


class DecodeError(ValidationError):
    pass


class CacheError(ValidationError):
    pass


class PromptError(ValidationError):
    pass


class EncoderError(ValidationError):
    pass


class MetricError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class TrainingError(RuntimeFailure):
    pass

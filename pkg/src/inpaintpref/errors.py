"""Exception types.

Every error carries a short ``category`` string; the CLI prints it as the
machine-parseable part of its one-line error report.
"""


class InpaintPrefError(Exception):
    category = "error"

    def __init__(self, message: str, category: str | None = None):
        super().__init__(message)
        if category is not None:
            self.category = category


class ShapeError(InpaintPrefError, ValueError):
    category = "shape"


class NonFiniteError(InpaintPrefError, FloatingPointError):
    category = "non-finite"


class InvalidArgument(InpaintPrefError, ValueError):
    category = "invalid-argument"


class SamplerAbort(NonFiniteError):
    category = "sampler-abort"

    def __init__(self, message: str, step: int, task_id: int | None = None,
                 candidate_idx: int | None = None):
        super().__init__(message)
        self.step = step
        self.task_id = task_id
        self.candidate_idx = candidate_idx


class TagMismatch(InpaintPrefError, ValueError):
    category = "tag-mismatch"


class FormatError(InpaintPrefError, ValueError):
    """Malformed container file. ``category`` is one of bad-magic,
    version-mismatch, truncated, checksum, malformed."""

    category = "malformed"


class MissingScores(InpaintPrefError, KeyError):
    category = "missing-scores"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return self.args[0]


class ConfigError(InpaintPrefError, ValueError):
    category = "config"


class JudgeError(InpaintPrefError):
    category = "judge"

    def __init__(self, message: str, category: str = "judge", raw: str | None = None):
        super().__init__(message, category)
        self.raw = raw

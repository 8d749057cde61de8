"""Exception types.

Every error carries a short machine-readable ``code`` so callers (and the CLI)
can branch on the failure kind without parsing messages.
"""


class CrossFilterError(Exception):
    code = "ERROR"

    def __init__(self, message: str = "", code: str | None = None):
        if code is not None:
            self.code = code
        super().__init__(f"{self.code}: {message}" if message else self.code)


class ClipTooShort(CrossFilterError, ValueError):
    code = "CLIP_TOO_SHORT"


class LabelArity(CrossFilterError, ValueError):
    code = "LABEL_ARITY"


class BadQ(CrossFilterError, ValueError):
    code = "BAD_Q"


class RepMismatch(CrossFilterError, ValueError):
    code = "REP_MISMATCH"


class EmptyTrainSet(CrossFilterError, ValueError):
    code = "EMPTY_TRAIN_SET"


class PredCoverage(CrossFilterError, KeyError):
    code = "PRED_COVERAGE"


class EmptyLabelSet(CrossFilterError, ValueError):
    code = "EMPTY_LABELSET"


class EmptyTest(CrossFilterError, ValueError):
    code = "EMPTY_TEST"


class ManifestError(CrossFilterError, ValueError):
    """Malformed manifest; ``row`` is the 1-based data row number (header excluded)."""

    code = "MANIFEST"

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class AudioReadError(CrossFilterError, IOError):
    code = "AUDIO_READ"

    def __init__(self, clip_id: str, reason: str):
        self.clip_id = clip_id
        super().__init__(f"clip {clip_id!r}: {reason}")


class ConfigError(CrossFilterError, ValueError):
    code = "CONFIG"

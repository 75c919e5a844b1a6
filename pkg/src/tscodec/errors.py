"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the CLI can emit a
single parsable line on failure.
"""


class CodecError(Exception):
    code = "E_CODEC"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ShapeError(CodecError, ValueError):
    code = "E_SHAPE"


class ConfigError(CodecError, ValueError):
    code = "E_CONFIG"


class FormatError(CodecError, ValueError):
    """Malformed, truncated or incompatible file/frame."""

    code = "E_FORMAT"


class IndexRangeError(CodecError, ValueError):
    code = "E_INDEX_RANGE"


class DigestMismatch(CodecError):
    code = "E_DIGEST_MISMATCH"


class NonFiniteLoss(CodecError, FloatingPointError):
    code = "E_NONFINITE"


class EmptyDataset(CodecError, ValueError):
    code = "E_EMPTY_DATASET"

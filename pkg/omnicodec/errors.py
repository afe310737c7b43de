"""
Error types for the codec.

Every error carries the CLI exit code it maps to:
    1 usage error, 2 I/O error, 3 data/format error, 4 numeric failure
"""

from typing import Optional


class CodecError(Exception):
    """Base class for all codec errors"""

    exit_code: int = 3


# =========================================================================
# Configuration
# =========================================================================

class NonIntegerHop(CodecError, ValueError):
    """Downsampling ratios do not give an exact frame rate"""


class ParseError(CodecError, ValueError):
    """Malformed configuration file line"""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


# =========================================================================
# Shapes and streams
# =========================================================================

class SampleRateMismatch(CodecError, ValueError):
    pass


class DimMismatch(CodecError, ValueError):
    pass


class ShapeMismatch(CodecError, ValueError):
    pass


class LengthMismatch(CodecError, ValueError):
    pass


class FrameMisalignment(CodecError, ValueError):
    pass


# =========================================================================
# Quantizers
# =========================================================================

class InvalidStageCount(CodecError, ValueError):
    pass


class NotInTrainingMode(CodecError, RuntimeError):
    pass


class EmptyBatch(CodecError, ValueError):
    pass


# =========================================================================
# Training
# =========================================================================

class NonFiniteLoss(CodecError, ArithmeticError):
    """A loss term became NaN or infinite"""

    exit_code = 4

    def __init__(self, term: str, value: Optional[float] = None):
        detail = f" (value={value})" if value is not None else ""
        super().__init__(f"Non-finite loss term '{term}'{detail}")
        self.term = term


class ClipTooShort(CodecError, ValueError):
    pass


# =========================================================================
# Files
# =========================================================================

class IoError(CodecError, OSError):
    exit_code = 2


class VersionMismatch(CodecError, ValueError):
    pass


class ConfigHashMismatch(CodecError, ValueError):
    pass


class TokenOutOfRange(CodecError, ValueError):
    pass


class BadMagic(CodecError, ValueError):
    pass


class UnsupportedVersion(CodecError, ValueError):
    pass


class TruncatedPayload(CodecError, ValueError):
    pass


class UnsupportedWavEncoding(CodecError, ValueError):
    pass


# =========================================================================
# Evaluation
# =========================================================================

class InsufficientStreams(CodecError, ValueError):
    pass


class EmptyCorpus(CodecError, ValueError):
    pass

"""Exception types shared across the package.

Every error raised by the public API derives from SpeakStyleError so callers
can catch one base.  File and format errors additionally derive from the
matching builtin so generic handlers keep working.
"""


class SpeakStyleError(Exception):
    """Base class for all package errors."""


# --- file ingestion ---------------------------------------------------------

class MissingFile(SpeakStyleError, FileNotFoundError):
    pass


class MalformedRow(SpeakStyleError, ValueError):
    def __init__(self, path, line, detail):
        super().__init__(f"{path}:{line}: {detail}")
        self.path = path
        self.line = line
        self.detail = detail


class WeightOutOfRange(SpeakStyleError, ValueError):
    def __init__(self, path, line, col, value):
        super().__init__(
            f"{path}:{line}: column {col} holds {value!r}, outside [0, 1]"
        )
        self.path = path
        self.line = line
        self.col = col
        self.value = value


class DurationMismatch(SpeakStyleError, ValueError):
    def __init__(self, total, expected):
        super().__init__(f"durations sum to {total}, expected {expected}")
        self.total = total
        self.expected = expected


class UnknownPhoneme(SpeakStyleError, ValueError):
    def __init__(self, symbol):
        super().__init__(f"phoneme symbol {symbol!r} is not in the inventory")
        self.symbol = symbol


class OutOfBounds(SpeakStyleError, IndexError):
    pass


class UnknownId(SpeakStyleError, ValueError):
    pass


# --- model-facing contracts -------------------------------------------------

class WindowTooShort(SpeakStyleError, ValueError):
    pass


class ShapeMismatch(SpeakStyleError, ValueError):
    pass


class DimensionMismatch(SpeakStyleError, ValueError):
    pass


class LengthMismatch(SpeakStyleError, ValueError):
    pass


class DurationSumMismatch(SpeakStyleError, ValueError):
    pass


class EmptyDuration(SpeakStyleError, ValueError):
    pass


class AllMaskedRow(SpeakStyleError, ValueError):
    pass


class InvalidMaskSpec(SpeakStyleError, ValueError):
    pass


class MaskWithoutContext(SpeakStyleError, ValueError):
    pass


class UnknownIdentity(SpeakStyleError, ValueError):
    pass


# --- training / evaluation --------------------------------------------------

class ConfigError(SpeakStyleError, ValueError):
    pass


class DataError(SpeakStyleError, ValueError):
    pass


class NonFiniteLoss(SpeakStyleError, ArithmeticError):
    def __init__(self, component):
        super().__init__(f"loss component {component!r} is not finite")
        self.component = component


class TooShort(SpeakStyleError, ValueError):
    pass


class TooFewSamples(SpeakStyleError, ValueError):
    pass


class NonFiniteCovariance(SpeakStyleError, ArithmeticError):
    pass


class MissingScorer(SpeakStyleError, FileNotFoundError):
    pass


class MissingCheckpoint(SpeakStyleError, FileNotFoundError):
    pass


class MissingVariant(SpeakStyleError, KeyError):
    pass

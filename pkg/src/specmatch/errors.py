"""Exception hierarchy shared by all modules."""


class SpecMatchError(Exception):
    """Base class for every error raised by this package."""


class ParseError(SpecMatchError):
    pass


class MalformedLine(ParseError):
    def __init__(self, line_no, line=""):
        self.line_no = line_no
        super().__init__(f"unparseable data line {line_no}: {line!r}")


class EmptySpectrum(ParseError):
    pass


class NonMonotonicGrid(ParseError):
    pass


class InvalidGrid(SpecMatchError, ValueError):
    pass


class NonFiniteInput(SpecMatchError, ValueError):
    pass


class SolveFailure(SpecMatchError):
    pass


class ShapeMismatch(SpecMatchError, ValueError):
    pass


class DegenerateBatch(SpecMatchError, ValueError):
    pass


class NoForwardCache(SpecMatchError, RuntimeError):
    pass


class NoPositivePairs(SpecMatchError, ValueError):
    pass


class TooFewClasses(SpecMatchError, ValueError):
    pass


class ModelMismatch(SpecMatchError):
    pass


class UnknownClass(SpecMatchError, KeyError):
    pass


class EmptyDB(SpecMatchError):
    pass


class ZeroVector(SpecMatchError, ValueError):
    pass


class LengthMismatch(SpecMatchError, ValueError):
    pass


class FormatError(SpecMatchError):
    """A binary artifact has a bad magic, version or checksum."""


class ConfigError(SpecMatchError, ValueError):
    pass


class NoValidFiles(SpecMatchError):
    pass

"""Exception hierarchy.

Every error belongs to one family, and each family carries the process exit
code the command-line front end reports for it.
"""


class CalibError(Exception):
    exit_code = 1


class ConfigError(CalibError):
    exit_code = 2


class InvalidSpec(ConfigError):
    pass


# -- io / parse family ------------------------------------------------------

class DataError(CalibError):
    exit_code = 3


class IoError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class NonMonotonic(ParseError):
    pass


class NotUnit(ParseError):
    pass


class MissingKey(ParseError):
    def __init__(self, key, path=None):
        self.key = key
        super().__init__(f"missing key {key!r}", path=path)


class NonPositiveFocal(ParseError):
    pass


class InvalidIntrinsics(ParseError):
    pass


class UnknownFrame(DataError):
    pass


class FrameMismatch(DataError):
    pass


# -- degeneracy family ------------------------------------------------------

class DegeneracyError(CalibError):
    exit_code = 4


class OutOfRange(DegeneracyError):
    pass


class DegenerateInterval(DegeneracyError):
    pass


class NoOverlap(DegeneracyError):
    pass


class TooFewPairs(DegeneracyError):
    pass


class DegenerateRotations(DegeneracyError):
    pass


class NoVisiblePoints(DegeneracyError):
    pass


class NoCorrespondences(DegeneracyError):
    pass


# -- solver family ----------------------------------------------------------

class SolverError(CalibError):
    exit_code = 5


class SingularSystem(SolverError):
    pass


class EvalError(SolverError):
    pass


class BehindCamera(EvalError):
    pass


# -- validation family ------------------------------------------------------

class ValidationError(CalibError):
    exit_code = 6

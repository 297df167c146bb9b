"""
SketchReg error hierarchy
Every library failure maps to one CLI exit code
"""

EXIT_OK = 0
EXIT_CONTRACT = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4
EXIT_VIOLATION = 5


class SketchRegError(Exception):
    """Base class for all library errors"""
    exit_code = 1


class ContractViolation(SketchRegError, ValueError):
    """Caller broke a precondition (bad parameter, index out of range, malformed input)"""
    exit_code = EXIT_CONTRACT


class MergeIncompatible(ContractViolation):
    """Two sketches were built with different configurations"""


class SketchIOError(SketchRegError, OSError):
    """A file could not be read or written, or has a bad header"""
    exit_code = EXIT_IO


class NumericalFailure(SketchRegError, ArithmeticError):
    """Non-finite values, rank deficiency or a non-SPD covariance"""
    exit_code = EXIT_NUMERICAL


class SingularPosterior(NumericalFailure):
    """The (augmented) regression system does not have full column rank"""


def error_result(exc):
    """Turn an exception into the result dict the CLI reports"""
    exit_code = getattr(exc, 'exit_code', None)
    if exit_code is None:
        exit_code = EXIT_IO if isinstance(exc, OSError) else 1
    return {'success': False, 'error': str(exc), 'exit_code': exit_code}

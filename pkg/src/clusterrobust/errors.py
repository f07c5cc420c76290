"""Exception hierarchy.

Every error carries a stable machine-readable ``code`` used by the command
line front end. Errors deriving from :class:`ConfigError` map to exit status
2, everything else deriving from :class:`EstimationError` maps to exit
status 1.
"""

from __future__ import annotations


class ClusterRobustError(Exception):
    """Base class for all package errors."""

    code = "ERROR"


class ConfigError(ClusterRobustError, ValueError):
    """Invalid input, configuration or dataset."""

    code = "CONFIG_ERROR"


class EstimationError(ClusterRobustError, ArithmeticError):
    """Numerical failure while estimating."""

    code = "ESTIMATION_ERROR"


# -- data construction -------------------------------------------------------


class EmptyInput(ConfigError):
    code = "EMPTY_INPUT"


class LengthMismatch(ConfigError):
    code = "LENGTH_MISMATCH"


class NonFiniteEntry(ConfigError):
    code = "NON_FINITE_ENTRY"

    def __init__(self, row: int, col: int):
        super().__init__(f"non-finite entry at row {row}, column {col}")
        self.row = row
        self.col = col


class InvalidMomentOrder(ConfigError):
    code = "INVALID_MOMENT_ORDER"


class ParseError(ConfigError):
    code = "PARSE_ERROR"

    def __init__(self, line: int, col: str | int, message: str = ""):
        text = f"cannot parse value at line {line}, column {col!r}"
        if message:
            text += f": {message}"
        super().__init__(text)
        self.line = line
        self.col = col


class MissingColumn(ConfigError):
    code = "MISSING_COLUMN"

    def __init__(self, name: str):
        super().__init__(f"column {name!r} not found")
        self.name = name


class EmptyFile(ConfigError):
    code = "EMPTY_FILE"


class WrongConfig(ConfigError):
    code = "WRONG_CONFIG"


class WrongWeightMode(ConfigError):
    code = "WRONG_WEIGHT_MODE"


# -- linear algebra ----------------------------------------------------------


class DegenerateSample(EstimationError):
    code = "DEGENERATE_SAMPLE"


class NotSymmetric(EstimationError):
    code = "NOT_SYMMETRIC"


class IndefiniteMatrix(EstimationError):
    code = "INDEFINITE_MATRIX"


class SingularCovariance(EstimationError):
    code = "SINGULAR_COVARIANCE"


class NonPsdCovariance(EstimationError):
    code = "NON_PSD_COVARIANCE"


# -- estimators ---------------------------------------------------------------


class SingularInstrumentMoment(EstimationError):
    code = "SINGULAR_INSTRUMENT_MOMENT"


class RankDeficientDesign(EstimationError):
    code = "RANK_DEFICIENT_DESIGN"


class RankDeficientRestriction(EstimationError):
    code = "RANK_DEFICIENT_RESTRICTION"


class SingularHessian(EstimationError):
    code = "SINGULAR_HESSIAN"


class NonFiniteObjective(EstimationError):
    code = "NON_FINITE_OBJECTIVE"

    def __init__(self, theta, message: str = "objective is not finite"):
        super().__init__(f"{message} at theta={list(map(float, theta))}")
        self.theta = theta


class SingularWeight(EstimationError):
    code = "SINGULAR_WEIGHT"


class RankDeficientJacobian(EstimationError):
    code = "RANK_DEFICIENT_JACOBIAN"


class NonConvergence(EstimationError):
    code = "NON_CONVERGENCE"


class NonConvergenceWarning(RuntimeWarning):
    """Optimizer budget exhausted; the returned report has ``converged=False``."""


class ConditionNumberWarning(RuntimeWarning):
    pass


class DiagnosticWarning(UserWarning):
    pass

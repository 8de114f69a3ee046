"""
Error Types
Exception hierarchy shared by every service and mapped to CLI exit codes
"""

from typing import Optional


class MilcError(Exception):
    """Base class for all toolkit errors"""


class DimensionError(MilcError, ValueError):
    """Shape or width mismatch between tensors, models and data"""


class EmptyBagError(DimensionError):
    """A bag with zero instances reached an operator that needs K >= 1"""


class ParameterError(MilcError, ValueError):
    """A numeric parameter is outside its allowed range"""


class ContractError(MilcError, ValueError):
    """A documented precondition of an operation was violated"""


class NumericError(MilcError, ArithmeticError):
    """A forward operation produced NaN or Inf"""


class DataError(MilcError, ValueError):
    """Source data cannot satisfy a generator configuration"""


class UndefinedMetricError(MilcError, ValueError):
    """Metric is undefined for the given input (e.g. single-class AUC)"""


class ConfigError(MilcError, ValueError):
    """Invalid configuration file or command-line flag"""


class SweepError(MilcError, RuntimeError):
    """Every run of a seed sweep failed; `runs` keeps the failed records"""

    def __init__(self, message: str, runs: Optional[list] = None):
        self.runs = runs or []
        super().__init__(message)


class FormatError(MilcError, ValueError):
    """On-disk file does not match its declared format"""

    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        offset: Optional[int] = None,
        bag_id: Optional[str] = None
    ):
        self.path = path
        self.offset = offset
        self.bag_id = bag_id

        details = []
        if path is not None:
            details.append(f"file {path}")
        if offset is not None:
            details.append(f"offset {offset}")
        if bag_id is not None:
            details.append(f"bag {bag_id}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)

from typing import Optional


class ToolkitError(Exception):
    """Base class for every error raised by the toolkit"""


class CaseFormatError(ToolkitError):
    """Malformed case input; carries the location of the offending text"""

    def __init__(self, message: str, location: Optional[str] = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class CaseValidationError(ToolkitError):
    """A case invariant does not hold; carries the offending field"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ModelBuildError(ToolkitError):
    """An optimization model cannot be built from the given inputs"""


class SolverError(ToolkitError):
    """Numerical failure inside a solver, or a solve that ended without an optimum"""

    def __init__(self, message: str, status: Optional[str] = None):
        self.status = status
        super().__init__(message)


class UncertaintyError(ToolkitError):
    """Invalid uncertainty set, budget or sampling request"""


class UnknownConstraintError(ToolkitError, KeyError):
    """Multiplier lookup of a constraint name that does not exist"""

"""Exception hierarchy shared by all modules."""


class FbgrapeError(Exception):
    """Base class for library errors."""


class LayoutError(FbgrapeError):
    pass


class StateError(FbgrapeError):
    pass


class DimensionError(FbgrapeError):
    pass


class TruncationError(FbgrapeError):
    def __init__(self, message: str, lost_norm: float):
        super().__init__(message)
        self.lost_norm = lost_norm


class ContractError(FbgrapeError):
    """A documented precondition on an operator was violated."""


class ConfigError(FbgrapeError):
    pass


class DepthError(FbgrapeError):
    pass


class BranchCapError(FbgrapeError):
    pass


class ConditioningError(FbgrapeError):
    pass


class DeterminismError(FbgrapeError):
    pass


class SchemaVersionError(FbgrapeError):
    pass


class EngineMismatchError(FbgrapeError):
    pass


class NonFiniteError(FbgrapeError):
    pass

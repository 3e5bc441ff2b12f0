"""Exception types raised across the toolkit."""


class BnnError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(BnnError, ValueError):
    pass


class ConfigError(BnnError, ValueError):
    pass


class DataError(BnnError, ValueError):
    pass


class FormatError(BnnError, ValueError):
    """Malformed BTF1 tensor file or BNNC checkpoint."""


class GraphError(BnnError, RuntimeError):
    pass


class ContractError(BnnError, RuntimeError):
    """An operation was called outside its documented preconditions."""


class DivergenceError(BnnError, RuntimeError):
    """Training produced a non-finite loss."""

"""Exception types shared across the package."""


class HoidetError(Exception):
    """Base class for all package errors."""


class ShapeError(HoidetError):
    """Operands have incompatible shapes."""


class ContractError(HoidetError):
    """A caller violated an operation precondition."""


class ConfigError(HoidetError):
    """A run configuration is invalid. CLI exit code 2."""


class NumericError(HoidetError):
    """A non-finite value appeared where finiteness is guaranteed. CLI exit code 3."""


class SamplingError(HoidetError):
    """Rejection sampling exhausted its attempt budget."""


class FormatError(HoidetError):
    """A serialized artifact (checkpoint, dataset) does not match its schema."""

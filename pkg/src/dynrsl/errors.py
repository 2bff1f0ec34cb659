"""Exception types raised across the package."""


class DynRslError(Exception):
    pass


class ShapeError(DynRslError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(DynRslError, ValueError):
    pass


class DegenerateVectorError(DynRslError, ValueError):
    """A zero-norm vector was given where a direction is needed."""


class ContractError(DynRslError, ValueError):
    """A documented precondition was violated by the caller."""


class ParseError(DynRslError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ParseError):
    pass


class EmptyRegionError(DynRslError, ValueError):
    pass


class ConfigError(DynRslError, ValueError):
    pass


class TokenizationError(DynRslError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(DynRslError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteError(DynRslError, FloatingPointError):
    pass

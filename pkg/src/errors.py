from typing import Optional


class UVZError(Exception):
    """Base class for every error raised by the enhancement pipeline"""


class ShapeError(UVZError, ValueError):
    pass


class ConfigurationError(UVZError, ValueError):
    pass


class RangeError(UVZError, ValueError):
    pass


class ContractError(UVZError, RuntimeError):
    pass


class NumericalError(UVZError, ArithmeticError):
    def __init__(self, message: str, epoch: Optional[int] = None, step: Optional[int] = None):
        if epoch is not None or step is not None:
            message = f"{message} (epoch={epoch}, step={step})"
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class FormatError(UVZError, ValueError):
    """Malformed file contents; offset is the byte position where parsing failed"""

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        details = []
        if path is not None:
            details.append(str(path))
        if offset is not None:
            details.append(f"offset {offset}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.offset = offset
        self.path = path

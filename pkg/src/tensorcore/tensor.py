import logging
from contextlib import contextmanager
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

Shape = Tuple[int, int, int, int]

_MODE = {"dtype": np.float32, "debug": False}


def default_dtype() -> type:
    return _MODE["dtype"]


@contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Create tensors with the given dtype inside the block (float64 for gradient checks)"""
    previous = _MODE["dtype"]
    _MODE["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _MODE["dtype"] = previous


def debug_enabled() -> bool:
    return _MODE["debug"]


@contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    """Check every op output for NaN/Inf while the block runs"""
    previous = _MODE["debug"]
    _MODE["debug"] = enabled
    try:
        yield
    finally:
        _MODE["debug"] = previous


def check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"Non-finite values produced by {op}")


class Tensor:
    """Rank-4 (n, c, h, w) array that can take part in the differentiation tape.

    requires_grad marks leaves whose gradient should be kept after backward;
    node_id is set while the tensor is registered on the active tape.
    """

    def __init__(self, data: Union[np.ndarray, float, list], requires_grad: bool = False,
                 name: Optional[str] = None):
        array = np.array(data, dtype=default_dtype())
        if array.ndim != 4:
            raise ShapeError(f"Tensor data must be rank 4 (n, c, h, w), got shape {array.shape}")
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError(f"Tensor dimensions must be positive, got {array.shape}")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @classmethod
    def _from_op(cls, data: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = np.ascontiguousarray(data)
        tensor.grad = None
        tensor.node_id = None
        tensor.requires_grad = False
        tensor.name = None
        tensor.is_leaf = False
        if debug_enabled():
            check_finite(tensor.data, "tensor creation")
        return tensor

    @classmethod
    def zeros(cls, shape: Shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape: Shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    @classmethod
    def scalar(cls, value: float, requires_grad: bool = False) -> "Tensor":
        return cls(np.full((1, 1, 1, 1), value), requires_grad=requires_grad)

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        from . import functional as F
        return F.add(self, other) if isinstance(other, Tensor) else F.add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        from . import functional as F
        return F.sub(self, other) if isinstance(other, Tensor) else F.add_scalar(self, -other)

    def __rsub__(self, other: float) -> "Tensor":
        from . import functional as F
        return F.add_scalar(F.scale(self, -1.0), other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        from . import functional as F
        return F.mul(self, other) if isinstance(other, Tensor) else F.scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Union["Tensor", float]) -> "Tensor":
        from . import functional as F
        return F.div(self, other) if isinstance(other, Tensor) else F.scale(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        from . import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import functional as F
        return F.matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

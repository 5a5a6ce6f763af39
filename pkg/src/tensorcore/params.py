import logging
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from errors import ConfigurationError, ShapeError
from .tensor import Shape, Tensor

logger = logging.getLogger(__name__)


@dataclass
class Parameter:
    tensor: Tensor
    m: np.ndarray
    v: np.ndarray

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad


class ParamStore:
    """Ordered, named learnable tensors plus their Adam moments.

    Initial values depend only on (seed, name), so adding or removing one
    sub-network never changes the initialization of another.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.step = 0
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"Parameter {name!r} registered twice")
        tensor = Tensor(array, requires_grad=True, name=name)
        self._params[name] = Parameter(tensor, np.zeros_like(tensor.data), np.zeros_like(tensor.data))
        return tensor

    def uniform(self, name: str, shape: Shape, bound: float) -> Tensor:
        return self.add(name, self._rng(name).uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: Shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def constant(self, name: str, shape: Shape, value: float) -> Tensor:
        return self.add(name, np.full(shape, value))

    def get(self, name: str) -> Tensor:
        try:
            return self._params[name].tensor
        except KeyError:
            raise KeyError(f"Unknown parameter {name!r}") from None

    def parameter(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> List[str]:
        return [name for name in self._params if name.startswith(prefix)]

    def items(self) -> Iterator[Tuple[str, Parameter]]:
        return iter(self._params.items())

    def trainable_items(self) -> Iterator[Tuple[str, Parameter]]:
        return ((name, p) for name, p in self._params.items() if p.trainable)

    def set_trainable(self, prefix: str, trainable: bool) -> int:
        """Freeze or unfreeze every parameter whose name starts with prefix"""
        changed = 0
        for name, param in self._params.items():
            if name.startswith(prefix):
                param.tensor.requires_grad = trainable
                changed += 1
        logger.debug("set_trainable(%r, %s) touched %d parameters", prefix, trainable, changed)
        return changed

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.tensor.grad = None

    def count(self, prefix: str = "") -> int:
        return sum(p.tensor.data.size for name, p in self._params.items() if name.startswith(prefix))

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.tensor.data.copy()) for name, p in self._params.items())

    def optimizer_arrays(self) -> "OrderedDict[str, np.ndarray]":
        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, param in self._params.items():
            arrays[f"{name}.m"] = param.m.copy()
            arrays[f"{name}.v"] = param.v.copy()
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray], optimizer: Optional[Dict[str, np.ndarray]] = None,
                    prefix: str = "", strict: bool = True) -> int:
        """Copy named arrays into the store in place; shapes must match exactly"""
        loaded = 0
        for name in self.names(prefix):
            if name not in arrays:
                if strict:
                    raise ShapeError(f"Checkpoint has no array for parameter {name!r}")
                continue
            param = self._params[name]
            source = np.asarray(arrays[name])
            if source.shape != param.tensor.shape:
                raise ShapeError(f"Shape mismatch for parameter {name!r}: checkpoint {source.shape}, "
                                 f"model {param.tensor.shape}")
            param.tensor.data[...] = source
            if optimizer is not None and f"{name}.m" in optimizer:
                param.m[...] = optimizer[f"{name}.m"]
                param.v[...] = optimizer[f"{name}.v"]
            loaded += 1
        if strict:
            unknown = [name for name in arrays if name.startswith(prefix) and name not in self._params]
            if unknown:
                raise ShapeError(f"Checkpoint parameter {unknown[0]!r} has no counterpart in the model")
        return loaded

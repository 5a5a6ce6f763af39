import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractError
from .tensor import Tensor

logger = logging.getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeRecord:
    op: str
    inputs: Tuple[Optional[int], ...]
    output: int
    backward: BackwardRule


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so inputs are always registered
    before their consumers; backward walks them once in reverse.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self._nodes: List[Tensor] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.records)

    def node(self, tensor: Tensor) -> int:
        if tensor.node_id is None:
            tensor.node_id = len(self._nodes)
            self._nodes.append(tensor)
        return tensor.node_id

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardRule) -> None:
        input_ids = tuple(self.node(t) if t.requires_grad else None for t in inputs)
        output.requires_grad = True
        self.records.append(TapeRecord(op, input_ids, self.node(output), backward))

    def clear(self) -> None:
        for tensor in self._nodes:
            tensor.node_id = None
        self._nodes.clear()
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.shape != (1, 1, 1, 1):
            raise ContractError(f"backward needs a scalar loss of shape (1, 1, 1, 1), got {loss.shape}")
        if not self.records or loss.node_id is None:
            raise ContractError("Loss is not on the tape; record a new forward pass before calling backward again")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for record in reversed(self.records):
            grad = grads.pop(record.output, None)
            if grad is None:
                continue
            input_grads = record.backward(grad)
            for node_id, input_grad in zip(record.inputs, input_grads):
                if node_id is None or input_grad is None:
                    continue
                previous = grads.get(node_id)
                grads[node_id] = input_grad if previous is None else previous + input_grad

        written = 0
        for node_id, grad in grads.items():
            tensor = self._nodes[node_id]
            if tensor.is_leaf and tensor.requires_grad:
                grad = grad.astype(tensor.dtype, copy=False)
                tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                written += 1
        logger.debug("backward visited %d records, wrote %d leaf gradients", len(self.records), written)
        self.clear()


_ACTIVE = Tape()


def active_tape() -> Tape:
    return _ACTIVE


def is_recording() -> bool:
    return _ACTIVE.enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend tape recording (inference, validation, frozen sub-networks)"""
    previous = _ACTIVE.enabled
    _ACTIVE.enabled = False
    try:
        yield
    finally:
        _ACTIVE.enabled = previous


def backward(loss: Tensor) -> None:
    _ACTIVE.backward(loss)


def reset_tape() -> None:
    """Drop any partially recorded graph (after an aborted step)"""
    _ACTIVE.clear()

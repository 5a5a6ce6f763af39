from .tensor import Tensor, check_finite, debug_checks, debug_enabled, default_dtype, precision
from .tape import Tape, active_tape, backward, is_recording, no_grad, reset_tape
from .params import Parameter, ParamStore
from . import functional

__all__ = [
    "Tensor", "Tape", "Parameter", "ParamStore", "functional",
    "active_tape", "backward", "no_grad", "is_recording", "reset_tape",
    "precision", "default_dtype", "debug_checks", "debug_enabled", "check_finite",
]

"""
Optimizer Module
Adam with bias correction over a named parameter group, and the cosine
learning-rate schedule.
"""

import logging
import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from rdcnet.errors import ConfigError, UsageError
from rdcnet.tensor import Tensor

logger = logging.getLogger(__name__)


class ParamGroup:
    """Named trainable tensors with their Adam moment accumulators."""

    def __init__(self, params: Optional[Dict[str, Tensor]] = None):
        self.params: Dict[str, Tensor] = {}
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}
        self.step_count = 0
        for name, tensor in (params or {}).items():
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self.params:
            raise UsageError(f"duplicate parameter name {name!r}")
        if not tensor.track_grad:
            raise UsageError(f"parameter {name!r} must track gradients")
        self.params[name] = tensor
        self.first_moment[name] = np.zeros_like(tensor.data)
        self.second_moment[name] = np.zeros_like(tensor.data)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(t.size for t in self.params.values())


def adam_step(params: ParamGroup, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter; gradients are zeroed afterwards."""
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise UsageError(f"no gradient for parameter(s): {', '.join(missing)}")

    params.step_count += 1
    t = params.step_count
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t

    for name, tensor in params.items():
        grad = tensor.grad
        m = params.first_moment[name]
        v = params.second_moment[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        # parameters are the one place tensors change in place
        tensor.data -= update.astype(tensor.data.dtype, copy=False)
        tensor.zero_grad()


def cosine_lr(step: int, total: int, lr_max: float = 1e-3, lr_min: float = 1e-5) -> float:
    """lr_min + 0.5 * (lr_max - lr_min) * (1 + cos(pi * step / total))"""
    if total <= 0:
        raise UsageError(f"total steps must be positive, got {total}")
    if not 0 <= step <= total:
        raise UsageError(f"step {step} outside [0, {total}]")
    if lr_min > lr_max:
        raise ConfigError(f"lr_min {lr_min} exceeds lr_max {lr_max}", field='trainer.lr_min')
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))

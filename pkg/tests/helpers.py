"""
Shared oracles for the test suite: central finite differences and a
nested-loop convolution.
"""

from typing import Callable, Sequence

import numpy as np

from rdcnet.tensor import Tensor, backward


def numeric_grad(f: Callable[[], float], array: np.ndarray, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of f() w.r.t. `array`, perturbed in place."""
    grad = np.zeros_like(array)
    for idx in indices if indices is not None else np.ndindex(array.shape):
        orig = array[idx]
        array[idx] = orig + eps
        plus = f()
        array[idx] = orig - eps
        minus = f()
        array[idx] = orig
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build_loss: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between backward() and finite differences over all leaves."""
    for leaf in leaves:
        leaf.zero_grad()
    backward(build_loss())
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad.copy()
        numeric = numeric_grad(lambda: build_loss().item(), leaf.data, eps)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def naive_conv2d(x, w, b=None, stride=1, dilation=1, groups=1, padding=0):
    n, c, h, width = x.shape
    out_c, group_c, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - ((kh - 1) * dilation + 1)) // stride + 1
    out_w = (width + 2 * padding - ((kw - 1) * dilation + 1)) // stride + 1
    per_group = out_c // groups
    out = np.zeros((n, out_c, out_h, out_w))
    for s in range(n):
        for o in range(out_c):
            g = o // per_group
            for i in range(out_h):
                for j in range(out_w):
                    total = 0.0 if b is None else b[o]
                    for ci in range(group_c):
                        for u in range(kh):
                            for v in range(kw):
                                total += w[o, ci, u, v] * xp[s, g * group_c + ci,
                                                             i * stride + u * dilation, j * stride + v * dilation]
                    out[s, o, i, j] = total
    return out


def leaky(x, slope=0.01):
    return np.where(x > 0, x, slope * x)

"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from tcrdrp.core.tensor import Tape, Tensor


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. ``coords`` restricts the check to
    a subset of flat coordinates.
    """
    x0 = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        loss = f(leaf)
    analytic = tape.backward(loss)[leaf].ravel()
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = x0.copy().ravel()
        xm = x0.copy().ravel()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        worst = max(worst, _rel_err(analytic[i], (fp - fm) / (2 * h)))
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[Tensor, int]],
    h: float = 1e-5,
) -> float:
    """Check selected ``(tensor, flat index)`` coordinates of shared parameters.

    ``loss_fn`` closes over the parameter tensors and must be deterministic;
    values are perturbed in place and restored afterwards.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    worst = 0.0
    for tensor, i in params:
        a = grads[tensor].ravel()[i]
        base = tensor.values
        vals = []
        for step in (h, -h):
            bumped = base.copy().ravel()
            bumped[i] += step
            tensor.assign(bumped.reshape(base.shape))
            vals.append(loss_fn().item())
        tensor.assign(base)
        worst = max(worst, _rel_err(a, (vals[0] - vals[1]) / (2 * h)))
    return worst

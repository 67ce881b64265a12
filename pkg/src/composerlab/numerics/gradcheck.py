"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError, NumericError
from .tensor import Tape, Tensor, backward, no_tape


def _scalar(t: Tensor) -> float:
    if t.size != 1:
        raise ContractError(f"function under check must return a scalar, got shape {t.shape}")
    return float(t.data.reshape(()))


def finite_diff_check(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of ``|g_ad - g_fd| / (|g_ad| + 1e-12)``.

    ``f`` takes the tensor(s) in ``point`` positionally and returns a scalar
    tensor.  ``g_fd`` is the central difference with step ``h``.  Passing
    ``coords`` samples that many coordinates per tensor instead of all of
    them.
    """
    single = isinstance(point, Tensor)
    points = [point] if single else list(point)
    for p in points:
        if p.dtype != np.float64:
            raise ContractError("finite-difference checks need float64 tensors")
    leaves = [Tensor(p.data, requires_grad=True) for p in points]
    with Tape() as tape:
        out = f(*leaves)
    _scalar(out)
    grads = backward(out, tape, wrt=leaves)
    del tape

    worst = 0.0
    for i, leaf in enumerate(leaves):
        g_ad = grads[leaf].reshape(-1)
        base = leaf.data.reshape(-1)
        idx = np.arange(base.size)
        if coords is not None and coords < base.size:
            idx = (rng or np.random.default_rng(0)).choice(base.size, size=coords, replace=False)
        for j in idx:
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[j] += sign * h
                args = [Tensor(pert.reshape(leaf.shape)) if k == i else Tensor(l.data) for k, l in enumerate(leaves)]
                with no_tape():
                    v = _scalar(f(*args))
                if not np.isfinite(v):
                    raise NumericError(f"non-finite evaluation at tensor {i}, coordinate {int(j)}")
                vals.append(v)
            g_fd = (vals[0] - vals[1]) / (2.0 * h)
            err = abs(g_ad[j] - g_fd) / (abs(g_ad[j]) + 1e-12)
            worst = max(worst, float(err))
    return worst

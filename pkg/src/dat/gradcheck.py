"""Central-difference verification of backward rules."""
from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .tensor import Tensor, grad


class GradientComparison(NamedTuple):
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float, mask=None) -> np.ndarray:
    x = np.array(x, copy=True)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    check = np.ones(flat.size, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    for i in np.flatnonzero(check):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x)).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return out


def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, mask=None,
                            expect_mismatch: bool = False):
    """Compare the autodiff gradient of scalar ``f`` at ``x`` with central differences.

    Returns the max relative error ``|a - n| / max(|a|, |n|, 1e-8)`` over the
    checked coordinates (``mask`` selects them, default all). With
    ``expect_mismatch`` the analytic and numeric gradients are returned too,
    for ops whose backward rule deliberately disagrees with the function
    (stop-gradient, straight-through).
    """
    xv = np.asarray(x.data if isinstance(x, Tensor) else x)
    xt = Tensor(xv.copy(), requires_grad=True)
    (analytic,) = grad(f(xt), [xt])
    numeric = numeric_gradient(f, xv, h, mask)
    check = np.ones(xv.shape, bool) if mask is None else np.asarray(mask, bool)
    a, n = analytic[check], numeric[check]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    err = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    if expect_mismatch:
        return GradientComparison(err, analytic, numeric)
    return err


def kink_mask(values: np.ndarray, points, margin: float) -> np.ndarray:
    """True where ``values`` sit farther than ``margin`` from every kink point."""
    ok = np.ones(values.shape, bool)
    for p in points:
        ok &= np.abs(values - p) > margin
    return ok

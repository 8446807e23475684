"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import NumericError, ParameterError
from .tensor import Tensor, no_grad


def _scalar(value) -> float:
    out = float(np.asarray(value.data if isinstance(value, Tensor) else value).reshape(()))
    if not np.isfinite(out):
        raise NumericError(f"function evaluated to a non-finite value ({out})")
    return out


def numeric_gradient(evaluate: Callable[[], float], arr: np.ndarray, h: float) -> np.ndarray:
    """(f(x+h) - f(x-h)) / 2h per coordinate, perturbing ``arr`` in place."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = _scalar(evaluate())
            flat[i] = orig - h
            minus = _scalar(evaluate())
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
    return grad


# Below this magnitude entries are compared absolutely: central differences in
# float64 carry roughly 1e-10 of roundoff, and some gradients are exactly zero
# in exact arithmetic (an attention key bias shifts every logit of a row equally).
ERROR_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERROR_FLOOR) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(floor, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the analytic and numeric gradient of ``f`` at ``x``.

    Runs in float64 regardless of the dtype of ``x``.
    """
    if not h > 0:
        raise ParameterError(f"step h must be > 0, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    _scalar(out)
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    probe = Tensor(base)
    numeric = numeric_gradient(lambda: f(probe), base, h)
    return relative_error(analytic, numeric)


def check_parameters(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                     h: float = 1e-5) -> dict[str, float]:
    """Gradient check of ``loss_fn`` against every named parameter.

    ``loss_fn`` must read the parameters on each call (a model forward pass);
    parameters should already be float64.
    """
    if not h > 0:
        raise ParameterError(f"step h must be > 0, got {h}")
    for p in params.values():
        p.grad = None
    out = loss_fn()
    _scalar(out)
    out.backward()
    errors: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = relative_error(analytic, numeric_gradient(loss_fn, p.data, h))
    for p in params.values():
        p.grad = None
    return errors

"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from bmfl.errors import ConfigError, NumericalError
from bmfl.numerics.tensor import Tensor, no_grad


def _scalar(f: Callable[[], Tensor]) -> float:
    value = f()
    value = float(value.data if isinstance(value, Tensor) else value)
    if not math.isfinite(value):
        raise NumericalError(f"function value is not finite at the probe point ({value})")
    return value


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
                      upcast: bool = True) -> list[float]:
    """Per-parameter max of |analytic - central| / max(1, |central|).

    ``f`` is re-evaluated after each perturbation, so it must read the current
    parameter values. With ``upcast`` the parameters are temporarily promoted to
    float64; numpy promotion then carries the whole evaluation in double precision.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ConfigError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    originals = [p.data for p in params]
    flags = [p.requires_grad for p in params]
    try:
        for p in params:
            p.data = np.array(p.data, dtype=np.float64 if upcast else p.data.dtype, copy=True)
            p.requires_grad = True
            p.grad = None
        out = f()
        if not math.isfinite(float(out.data)):
            raise NumericalError(f"function value is not finite at the probe point ({float(out.data)})")
        out.backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
        errors = []
        with no_grad():
            for p, a in zip(params, analytic):
                worst = 0.0
                flat = p.data.reshape(-1)
                for i in range(flat.size):
                    old = flat[i]
                    flat[i] = old + eps
                    fp = _scalar(f)
                    flat[i] = old - eps
                    fm = _scalar(f)
                    flat[i] = old
                    central = (fp - fm) / (2 * eps)
                    err = abs(float(a.reshape(-1)[i]) - central) / max(1.0, abs(central))
                    worst = max(worst, err)
                errors.append(worst)
        return errors
    finally:
        for p, data, flag in zip(params, originals, flags):
            p.data = data
            p.requires_grad = flag
            p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               upcast: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients."""
    report = grad_check_report(f, params, eps, upcast)
    return max(report) if report else 0.0

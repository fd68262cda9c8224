"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import ParamStore, Tensor, backward


class NonDeterministicError(RuntimeError):
    pass


def finite_difference_gradcheck(
    f: Callable[[], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    samples_per_param: int | None = None,
    seed: int = 0,
    report: dict | None = None,
) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the current values of ``params``. All
    parameters must be float64. For each sampled coordinate the error is
    ``|analytic - numeric| / max(1, |analytic|)``; the maximum is returned.
    ``samples_per_param=None`` checks every coordinate.

    If ``report`` is given it is filled with the per-parameter maximum error.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"gradcheck requires 64-bit parameters; {name!r} is {p.dtype}")

    first = f()
    second = f()
    if first.data.size != 1:
        raise ValueError(f"gradcheck: f must return a scalar, got shape {first.shape}")
    if not np.array_equal(first.data, second.data):
        raise NonDeterministicError(
            f"gradcheck: f is not deterministic ({first.item()!r} != {second.item()!r})"
        )

    params.zero_grad()
    backward(second, params)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if samples_per_param is None or samples_per_param >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=samples_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        param_worst = 0.0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            up = f().item()
            flat[idx] = orig - step
            down = f().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * step)
            a = a_flat[idx]
            err = abs(a - numeric) / max(1.0, abs(a))
            param_worst = max(param_worst, err)
        if report is not None:
            report[name] = param_worst
        worst = max(worst, param_worst)
    params.zero_grad()
    return worst

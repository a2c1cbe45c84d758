"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import GradientError, SelectionLog, Tensor, frozen_selections, no_grad


def _scalar(value: Tensor) -> float:
    if value.data.size != 1:
        raise GradientError(f"gradcheck function must return a scalar, got shape {value.shape}")
    return float(value.data.reshape(-1)[0])


def _coords(size: int, max_coords: int | None, rng: np.random.Generator | None) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    rng = rng or np.random.default_rng(0)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def finite_diff_gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                          max_coords: int | None = None) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|).

    ``x`` is probed in place and restored afterwards.  Discrete selections made by
    ``f`` are recorded on the analytic pass and replayed on every probe.
    """
    return gradcheck_params(lambda params: f(params["x"]), {"x": x}, h=h,
                            max_coords=max_coords)["x"]


def gradcheck_params(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                     params: Mapping[str, Tensor], h: float = 1e-5,
                     max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Per-parameter max relative error of ``loss_fn``'s gradient.

    ``max_coords`` caps how many coordinates of each tensor are probed (chosen
    at random with ``seed``); None probes all of them.
    """
    log = SelectionLog()
    originals = {}
    for name, p in params.items():
        originals[name] = p.requires_grad
        p.requires_grad = True
        p.grad = None
    try:
        with frozen_selections(log):
            value = loss_fn(params)
            _scalar(value)
            value.backward()
        analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                    for name, p in params.items()}

        def probe() -> float:
            with no_grad(), frozen_selections(log):
                return _scalar(loss_fn(params))

        rng = np.random.default_rng(seed)
        errors: dict[str, float] = {}
        for name, p in params.items():
            flat = p.data.reshape(-1)
            worst = 0.0
            for i in _coords(flat.size, max_coords, rng):
                keep = flat[i]
                flat[i] = keep + h
                up = probe()
                flat[i] = keep - h
                down = probe()
                flat[i] = keep
                numeric = (up - down) / (2.0 * h)
                err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
            errors[name] = worst
        return errors
    finally:
        for name, p in params.items():
            p.requires_grad = originals[name]
            p.grad = None

"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward, kink_monitor, no_grad


def _rel_err(
    analytic: np.ndarray, numeric: np.ndarray, zero_tol: float = 0.0, scale: str = "coord"
) -> float:
    if scale == "tensor":
        # deviation measured against the largest gradient entry of the same tensor
        denom = np.max(np.abs(numeric), initial=0.0) + 1e-8
    else:
        denom = np.abs(numeric) + 1e-8
    err = np.abs(analytic - numeric) / denom
    if zero_tol > 0:
        # both sides at the rounding floor: a structurally zero gradient, not a mismatch
        err[(np.abs(analytic) <= zero_tol) & (np.abs(numeric) <= zero_tol)] = 0.0
    return float(err.max()) if err.size else 0.0


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    zero_tol: float = 0.0,
    scale: str = "coord",
) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    ``f`` maps a tensor to a scalar tensor.  The error per coordinate is
    ``|analytic - central| / (|central| + 1e-8)``.  Coordinates where both
    values are within ``zero_tol`` of zero are counted as exact (off by default).
    With ``scale="tensor"`` the denominator is instead the largest ``|central|``
    over the whole array, which keeps rounding noise on entries far smaller
    than their neighbours from dominating.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0, requires_grad=True)
    backward(f(xt))
    analytic = xt.grad.copy()

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x0)).item()
            flat[i] = orig - h
            fm = f(Tensor(x0)).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return _rel_err(analytic, numeric, zero_tol, scale)


def parameter_gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    zero_tol: float = 0.0,
    scale: str = "coord",
) -> float:
    """Finite-difference check of ``loss_fn`` w.r.t. parameters mutated in place.

    With ``max_coords`` set, that many coordinates are sampled per parameter.
    ``zero_tol`` and ``scale`` behave as in :func:`finite_difference_check`;
    with tensor scaling the denominator comes from the sampled coordinates.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        analytic = p.grad.reshape(-1)[coords]
        numeric = np.empty(len(coords))
        with no_grad():
            for n, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                numeric[n] = (fp - fm) / (2.0 * h)
        worst = max(worst, _rel_err(analytic, numeric, zero_tol, scale))
    return worst


def kink_margin(f: Callable[[], object]) -> float:
    """Closest approach to a ReLU, clamp or max-pool kink during one call of ``f``."""
    with no_grad(), kink_monitor() as monitor:
        f()
    return monitor.margin

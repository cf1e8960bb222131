"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic, numeric):
    """Elementwise |analytic - numeric| / max(1, |analytic|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


def grad_check(
    op: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    n_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences of ``op`` at ``point``.

    ``op`` maps a tensor to a scalar tensor.  With ``n_coords`` set, only that
    many randomly chosen coordinates are probed numerically.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    x = Tensor(base.copy(), requires_grad=True)
    backward(op(x))
    analytic = x.grad.ravel()

    coords = np.arange(base.size)
    if n_coords is not None and n_coords < base.size:
        coords = np.random.default_rng(seed).choice(base.size, size=n_coords, replace=False)

    flat = base.ravel()
    numeric = np.empty(len(coords))
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = op(Tensor(base)).item()
        flat[i] = orig - h
        fm = op(Tensor(base)).item()
        flat[i] = orig
        numeric[n] = (fp - fm) / (2.0 * h)
    return float(np.max(relative_error(analytic[coords], numeric), initial=0.0))


def check_parameters(loss_fn: Callable[[], Tensor], params, n_samples=20, h=1e-5, seed=0):
    """Finite-difference check of ``loss_fn`` w.r.t. randomly sampled parameter entries.

    ``loss_fn`` re-runs the full forward pass reading the live parameter
    arrays.  Returns ``(max_rel_err, rows)`` where each row is
    ``(name, flat_index, analytic, numeric)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params], dtype=np.float64)
    rows = []
    for _ in range(n_samples):
        # pick a parameter proportional to size, so small biases are not over-sampled
        p = params[rng.choice(len(params), p=sizes / sizes.sum())]
        i = int(rng.integers(p.data.size))
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn().item()
        flat[i] = orig - h
        fm = loss_fn().item()
        flat[i] = orig
        rows.append((p.name, i, float(p.grad.reshape(-1)[i]), (fp - fm) / (2.0 * h)))
    for p in params:
        p.zero_grad()
    err = max(float(relative_error(a, n)) for _, _, a, n in rows)
    return err, rows

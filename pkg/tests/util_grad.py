"""Finite-difference gradient oracle shared by the op and net tests.

The oracle evaluates the loss in float64 regardless of the dtype under test,
so reverse-mode gradients computed in float32 can be held to the 1e-3
relative tier and float64 gradients to 1e-6.
"""
from __future__ import annotations

import numpy as np


def fd_gradient(loss_of, arr: np.ndarray, coords, h: float) -> np.ndarray:
    """Central finite differences of loss_of(arr) at the given flat coords."""
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        keep = flat[i]
        flat[i] = keep + h
        lp = loss_of(arr)
        flat[i] = keep - h
        lm = loss_of(arr)
        flat[i] = keep
        out[n] = (lp - lm) / (2.0 * h)
    return out


def check_grad(
    loss_of,
    arr: np.ndarray,
    grad: np.ndarray,
    rng: np.random.Generator,
    n_coords: int = 6,
    h: float = 1e-6,
    rtol: float = 1e-3,
    atol: float | None = None,
):
    """Compare autodiff gradients against the FD oracle at random coords.

    Returns the worst relative error. atol guards coordinates whose true
    gradient is (near) zero, where FD reports roundoff noise."""
    coords = rng.choice(arr.size, size=min(n_coords, arr.size), replace=False)
    fd = fd_gradient(loss_of, arr.astype(np.float64, copy=True), coords, h)
    ad = grad.reshape(-1)[coords]
    scale = max(np.abs(fd).max(), np.abs(ad).max(), 1.0)
    atol = 1e-5 * scale if atol is None else atol
    worst = 0.0
    for a, f in zip(ad, fd):
        err = abs(a - f)
        if err > atol:
            rel = err / max(abs(a), abs(f))
            worst = max(worst, rel)
            assert rel < rtol, f"gradient mismatch: ad={a:.6e} fd={f:.6e} rel={rel:.2e}"
    return worst

"""Batched adaptive Runge-Kutta integration.

Implements the Dormand-Prince 5(4) embedded pair with fully independent
per-sample step-size control: integrating a batch of states gives results
bit-identical to integrating each state on its own, which lets ensemble
propagation share one code path with single-state propagation.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = ["StepSizeUnderflowError", "solve_rk45"]

# Dormand-Prince 5(4) tableau (the ode45 / RK45 pair).
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = np.zeros((7, 7))
_A[1, 0] = 1 / 5
_A[2, :2] = (3 / 40, 9 / 40)
_A[3, :3] = (44 / 45, -56 / 15, 32 / 9)
_A[4, :4] = (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729)
_A[5, :5] = (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656)
_A[6, :6] = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
# 5th-order weights equal the last A row (FSAL); E = b5 - b4 gives the error.
_B = _A[6].copy()
_E = np.array(
    [
        71 / 57600,
        0.0,
        -71 / 16695,
        71 / 1920,
        -17253 / 339200,
        22 / 525,
        -1 / 40,
    ]
)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_ERR_EXPONENT = -1 / 5


class StepSizeUnderflowError(RuntimeError):
    """Raised when the controller cannot make progress at any finite step."""

    def __init__(self, t: float, sample_index: int):
        super().__init__(
            f"step size underflow at t={t!r} (sample {sample_index})"
        )
        self.t = t
        self.sample_index = sample_index


def _error_norm(err: np.ndarray, y0: np.ndarray, y1: np.ndarray,
                rtol: float, atol: float) -> np.ndarray:
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return np.sqrt(np.mean((err / scale) ** 2, axis=-1))


def _initial_step(rhs: Callable, t0: np.ndarray, y0: np.ndarray,
                  f0: np.ndarray, dt: np.ndarray, rtol: float,
                  atol: float) -> np.ndarray:
    # Hairer-Norsett-Wanner style guess, evaluated per sample.
    direction = np.sign(dt)
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2, axis=-1))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2, axis=-1))
    h0 = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    h0 = np.minimum(h0, np.abs(dt))
    y1 = y0 + (direction * h0)[..., None] * f0
    f1 = rhs(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2, axis=-1)) / np.maximum(h0, 1e-300)
    dmax = np.maximum(d1, d2)
    h1 = np.where(dmax <= 1e-15,
                  np.maximum(1e-6, h0 * 1e-3),
                  (0.01 / dmax) ** (1 / 5))
    return np.minimum(np.minimum(100 * h0, h1), np.abs(dt))


def solve_rk45(rhs: Callable[[np.ndarray, np.ndarray], np.ndarray],
               y0: np.ndarray,
               dt: float | np.ndarray,
               rtol: float = 1e-12,
               atol: float = 1e-12,
               t0: float | np.ndarray = 0.0,
               max_steps: int = 2_000_000) -> np.ndarray:
    """Advance ``y0`` by ``dt`` under ``dy/dt = rhs(t, y)``.

    ``y0`` has shape (..., D); ``dt`` and ``t0`` broadcast over the batch
    shape. ``rhs`` must accept ``t`` of shape (N,) and ``y`` of shape
    (N, D) and operate elementwise per sample. ``dt`` may be negative.
    Samples with ``dt == 0`` are returned unchanged, bit for bit.
    """
    y0 = np.asarray(y0, dtype=float)
    squeeze = y0.ndim == 1
    y = np.atleast_2d(y0).copy()
    n, dim = y.shape
    t = np.broadcast_to(np.asarray(t0, dtype=float), (n,)).copy()
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (n,)).copy()
    t_end = t + dt

    active = dt != 0.0
    if not np.any(active):
        return y0.copy()

    idx = np.flatnonzero(active)
    ya = y[idx]
    ta = t[idx]
    ea = t_end[idx]
    da = np.sign(ea - ta)
    fa = rhs(ta, ya)
    ha = da * _initial_step(rhs, ta, ya, fa, ea - ta, rtol, atol)

    k = np.empty((7, idx.size, dim))
    for _ in range(max_steps):
        # Do not step past the target; land on it exactly.
        clipped = da * (ea - ta) <= da * ha
        ha = np.where(clipped, ea - ta, ha)

        tiny = 16 * np.finfo(float).eps * np.maximum(np.abs(ta), np.abs(ea))
        under = np.abs(ha) < np.minimum(tiny, np.abs(ea - ta))
        if np.any(under):
            j = int(np.flatnonzero(under)[0])
            raise StepSizeUnderflowError(float(ta[j]), int(idx[j]))

        k[0] = fa
        for s in range(1, 7):
            ys = ya + ha[:, None] * np.einsum("s,snd->nd", _A[s, :s], k[:s])
            k[s] = rhs(ta + _C[s] * ha, ys)
        y_new = ya + ha[:, None] * np.einsum("s,snd->nd", _B, k)
        err = ha[:, None] * np.einsum("s,snd->nd", _E, k)
        enorm = _error_norm(err, ya, y_new, rtol, atol)

        accept = enorm <= 1.0
        with np.errstate(divide="ignore"):
            factor = np.where(
                enorm == 0.0,
                _MAX_FACTOR,
                np.clip(_SAFETY * enorm**_ERR_EXPONENT, _MIN_FACTOR, _MAX_FACTOR),
            )
        factor = np.where(accept, factor, np.minimum(factor, 1.0))
        # A step clipped to hit t_end exactly must not inflate the next trial.
        grow = np.where(accept & clipped, np.maximum(factor, 1.0), factor)

        # Land exactly on t_end for clipped steps (no 1-ulp residue).
        ta = np.where(accept, np.where(clipped, ea, ta + ha), ta)
        done_now = accept & (da * (ea - ta) <= 0.0)
        ya = np.where(accept[:, None], y_new, ya)
        fa = np.where(accept[:, None], k[6], fa)  # FSAL
        ha = ha * grow

        if np.any(done_now):
            rows = np.flatnonzero(done_now)
            y[idx[rows]] = ya[rows]
            keep = ~done_now
            if not np.any(keep):
                break
            idx = idx[keep]
            ya, ta, ea, da, fa, ha = (a[keep] for a in (ya, ta, ea, da, fa, ha))
            k = k[:, keep]
    else:
        raise RuntimeError(f"integration exceeded {max_steps} steps")

    return y[0] if squeeze else y

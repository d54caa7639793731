"""Angles-only measurement model with Gaussian noise and visibility gating.

Azimuth is measured from the topocentric x-axis (east) toward y (north),
elevation from the local horizon; both in radians. Azimuth residuals are
always wrapped to (-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Epoch, TopocentricState

__all__ = [
    "ARCSEC_RAD",
    "DEFAULT_SIGMA_RAD",
    "ZeroRangeError",
    "Measurement",
    "VisibilityPolicy",
    "wrap_angle",
    "measure",
    "log_likelihood",
    "synthesize",
    "visible",
]

ARCSEC_RAD = math.pi / (180.0 * 3600.0)
# 1 arcsec per axis: modern catalog-calibrated optical astrometry. Coarser
# noise starves the single-pass geometry of velocity information (see the
# batch information-bound check in the acceptance tests).
DEFAULT_SIGMA_RAD = 1.0 * ARCSEC_RAD

_MIN_RANGE_KM = 1e-6


class ZeroRangeError(ValueError):
    """Target range below the measurable floor."""


def default_noise_cov() -> np.ndarray:
    return np.diag([DEFAULT_SIGMA_RAD**2, DEFAULT_SIGMA_RAD**2])


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    w = a - 2.0 * math.pi * np.round(np.asarray(a, dtype=float) / (2.0 * math.pi))
    w = np.where(w <= -math.pi, w + 2.0 * math.pi, w)
    return float(w) if np.ndim(a) == 0 else w


@dataclass(frozen=True)
class Measurement:
    """One azimuth/elevation pair with its epoch and noise covariance."""

    az: float
    el: float
    epoch: Epoch
    noise_cov: np.ndarray = field(default_factory=default_noise_cov)

    def __post_init__(self):
        if not (-math.pi < self.az <= math.pi):
            raise ValueError(f"azimuth {self.az} outside (-pi, pi]")
        if not (-math.pi / 2 <= self.el <= math.pi / 2):
            raise ValueError(f"elevation {self.el} outside [-pi/2, pi/2]")
        cov = np.asarray(self.noise_cov, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise ValueError("noise_cov must be a symmetric 2x2 matrix")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("noise_cov must be positive definite") from exc
        object.__setattr__(self, "noise_cov", cov)

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.az, self.el])


@dataclass(frozen=True)
class VisibilityPolicy:
    """Elevation mask; the target counts as visible at the mask itself."""

    min_elevation_rad: float = math.radians(15.0)

    def __post_init__(self):
        if not 0.0 <= self.min_elevation_rad < math.pi / 2:
            raise ValueError("min_elevation must lie in [0, pi/2)")


def _as_states(state) -> tuple[np.ndarray, bool]:
    if isinstance(state, TopocentricState):
        return state.array[None, :], True
    a = np.asarray(state, dtype=float)
    if a.ndim == 1:
        return a[None, :], True
    return a, False


def measure(state) -> np.ndarray:
    """Azimuth/elevation of topocentric state(s); shape (..., 2).

    At the zenith/nadir singularity (x = y = 0) azimuth is 0 by convention.
    """
    y, single = _as_states(state)
    rho = np.sqrt(np.sum(y[..., :3] ** 2, axis=-1))
    if np.any(rho < _MIN_RANGE_KM):
        raise ZeroRangeError(f"range below {_MIN_RANGE_KM} km")
    az = np.arctan2(y[..., 1], y[..., 0])
    el = np.arcsin(np.clip(y[..., 2] / rho, -1.0, 1.0))
    out = np.stack([az, el], axis=-1)
    return out[0] if single else out


def _chol2(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("noise covariance not positive definite") from exc


def log_likelihood(z: Measurement, state) -> float | np.ndarray:
    """Log Gaussian density of the wrapped (az, el) residual."""
    predicted = measure(state)
    pred = np.atleast_2d(predicted)
    resid = np.empty_like(pred)
    resid[:, 0] = wrap_angle(z.az - pred[:, 0])
    resid[:, 1] = z.el - pred[:, 1]
    L = _chol2(z.noise_cov)
    w = np.linalg.solve(L, resid.T)
    quad = np.sum(w**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    ll = -0.5 * (2.0 * math.log(2.0 * math.pi) + logdet + quad)
    return float(ll[0]) if predicted.ndim == 1 else ll


def synthesize(state_true, epoch: Epoch, noise_cov: np.ndarray,
               rng: np.random.Generator) -> Measurement:
    """Noisy measurement of a true topocentric state; deterministic per rng."""
    truth = measure(state_true)
    L = _chol2(np.asarray(noise_cov, dtype=float))
    noise = L @ rng.standard_normal(2)
    az = wrap_angle(truth[0] + noise[0])
    el = float(truth[1] + noise[1])
    return Measurement(az=float(az), el=el, epoch=epoch, noise_cov=noise_cov)


def visible(state, policy: VisibilityPolicy) -> bool | np.ndarray:
    """True where elevation is at or above the mask."""
    angles = measure(state)
    el = np.atleast_2d(angles)[:, 1]
    vis = el >= policy.min_elevation_rad
    return bool(vis[0]) if np.asarray(angles).ndim == 1 else vis

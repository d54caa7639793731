"""Earth-Moon CR3BP dynamics and observer frame transformations.

All propagation happens in the barycentric synodic frame with the usual
nondimensionalization (Earth-Moon distance, inverse mean motion). The
observer frame chain assumes a circular planar Earth-Moon orbit, an Earth
spin axis normal to that plane, and a spherical Earth, which keeps every
transformation affine at fixed epoch and exactly invertible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .integrators import StepSizeUnderflowError, solve_rk45

__all__ = [
    "GM_EARTH_KM3_S2",
    "GM_MOON_KM3_S2",
    "EARTH_RADIUS_KM",
    "EARTH_MOON_MU",
    "EARTH_MOON_LSTAR_KM",
    "EARTH_MOON_TSTAR_S",
    "DegenerateStateError",
    "StepSizeUnderflowError",
    "Epoch",
    "SystemParams",
    "SynodicState",
    "TopocentricState",
    "cr3bp_accel",
    "cr3bp_rhs",
    "jacobi_constant",
    "propagate",
    "synodic_to_topocentric",
    "topocentric_to_synodic",
]

# DE430 gravitational parameters, km^3/s^2.
GM_EARTH_KM3_S2 = 398600.435436
GM_MOON_KM3_S2 = 4902.800066
EARTH_RADIUS_KM = 6378.137

EARTH_MOON_LSTAR_KM = 384400.0
EARTH_MOON_MU = GM_MOON_KM3_S2 / (GM_EARTH_KM3_S2 + GM_MOON_KM3_S2)
EARTH_MOON_TSTAR_S = math.sqrt(
    EARTH_MOON_LSTAR_KM**3 / (GM_EARTH_KM3_S2 + GM_MOON_KM3_S2)
)

# Hour-angle offset of the Moon line east of the observer meridian at epoch 0.
PASS_START_OFFSET_RAD = math.radians(64.0)

# Nondimensional time since scenario start.
Epoch = float


class DegenerateStateError(ValueError):
    """State sits inside the exclusion radius of one of the primaries."""


@dataclass(frozen=True)
class SystemParams:
    """Physical constants plus observer site for one tracking problem."""

    mu: float = EARTH_MOON_MU
    l_star_km: float = EARTH_MOON_LSTAR_KM
    t_star_s: float = EARTH_MOON_TSTAR_S
    omega_earth_rad_s: float = 7.2921159e-5
    observer_lat_rad: float = math.radians(30.62)
    observer_lon_rad: float = math.radians(-96.34)
    observer_alt_km: float = 0.1
    # None places the Moon 64 deg east of the observer's meridian at epoch 0,
    # so the default target clears the elevation mask shortly after t = 0 and
    # the whole rising-to-setting window fits in one pass.
    earth_spin_angle0_rad: float | None = None
    r_floor: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.mu < 0.5:
            raise ValueError(f"mu must be in (0, 0.5), got {self.mu}")
        for name in ("l_star_km", "t_star_s", "omega_earth_rad_s"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    @property
    def v_star_km_s(self) -> float:
        return self.l_star_km / self.t_star_s

    @property
    def spin_angle0_rad(self) -> float:
        if self.earth_spin_angle0_rad is not None:
            return self.earth_spin_angle0_rad
        return -self.observer_lon_rad - PASS_START_OFFSET_RAD

    def seconds_to_nondim(self, seconds: float) -> float:
        return seconds / self.t_star_s


@dataclass(frozen=True)
class SynodicState:
    """Nondimensional position/velocity in the rotating barycentric frame."""

    x: float
    y: float
    z: float
    vx: float
    vy: float
    vz: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.array)):
            raise ValueError("synodic state components must be finite")

    @property
    def array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.vx, self.vy, self.vz])

    @classmethod
    def from_array(cls, a: np.ndarray) -> "SynodicState":
        return cls(*(float(v) for v in np.asarray(a).reshape(6)))


@dataclass(frozen=True)
class TopocentricState:
    """km / km/s relative to the observer site, local east-north-up axes."""

    x: float
    y: float
    z: float
    vx: float
    vy: float
    vz: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.array)):
            raise ValueError("topocentric state components must be finite")

    @property
    def array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.vx, self.vy, self.vz])

    @classmethod
    def from_array(cls, a: np.ndarray) -> "TopocentricState":
        return cls(*(float(v) for v in np.asarray(a).reshape(6)))


def _as_batch(state) -> tuple[np.ndarray, bool]:
    if isinstance(state, (SynodicState, TopocentricState)):
        return state.array[None, :], True
    a = np.asarray(state, dtype=float)
    if a.ndim == 1:
        return a[None, :], True
    return a, False


def _primary_distances(y: np.ndarray, mu: float) -> tuple[np.ndarray, np.ndarray]:
    dx1 = y[..., 0] + mu
    dx2 = y[..., 0] - 1.0 + mu
    yy = y[..., 1] ** 2 + y[..., 2] ** 2
    r1 = np.sqrt(dx1**2 + yy)
    r2 = np.sqrt(dx2**2 + yy)
    return r1, r2


def _check_floor(r1: np.ndarray, r2: np.ndarray, r_floor: float) -> None:
    bad = (r1 < r_floor) | (r2 < r_floor)
    if np.any(bad):
        i = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise DegenerateStateError(
            f"state within {r_floor} nondim of a primary (sample {i})"
        )


def cr3bp_accel(state, p: SystemParams) -> np.ndarray:
    """Rotating-frame acceleration (x'', y'', z''), nondimensional."""
    y, single = _as_batch(state)
    mu = p.mu
    r1, r2 = _primary_distances(y, mu)
    _check_floor(r1, r2, p.r_floor)
    r13 = r1**3
    r23 = r2**3
    ax = (
        y[..., 0]
        + 2.0 * y[..., 4]
        - (1.0 - mu) * (y[..., 0] + mu) / r13
        - mu * (y[..., 0] - 1.0 + mu) / r23
    )
    ay = (
        y[..., 1]
        - 2.0 * y[..., 3]
        - (1.0 - mu) * y[..., 1] / r13
        - mu * y[..., 1] / r23
    )
    az = -(1.0 - mu) * y[..., 2] / r13 - mu * y[..., 2] / r23
    acc = np.stack([ax, ay, az], axis=-1)
    return acc[0] if single else acc


def cr3bp_rhs(t, y: np.ndarray, p: SystemParams) -> np.ndarray:
    """Time-derivative of the 6-state; ``t`` is unused (autonomous flow)."""
    out = np.empty_like(y)
    out[..., :3] = y[..., 3:]
    out[..., 3:] = cr3bp_accel(y, p)
    return out


def jacobi_constant(state, p: SystemParams) -> float | np.ndarray:
    """2*U - v^2: conserved along CR3BP flow, used as a propagation check."""
    y, single = _as_batch(state)
    r1, r2 = _primary_distances(y, p.mu)
    _check_floor(r1, r2, p.r_floor)
    ustar = (
        (1.0 - p.mu) / r1
        + p.mu / r2
        + 0.5 * (y[..., 0] ** 2 + y[..., 1] ** 2)
    )
    v2 = np.sum(y[..., 3:] ** 2, axis=-1)
    jc = 2.0 * ustar - v2
    return float(jc[0]) if single else jc


def propagate(state, dt, p: SystemParams, tol: float = 1e-12):
    """Advance a state (or (N, 6) batch) by ``dt`` nondimensional time.

    Adaptive embedded Runge-Kutta; deterministic for fixed inputs, and
    batched calls agree bit for bit with per-state calls. ``dt = 0``
    returns the input unchanged. ``dt`` may be negative or per-sample.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    y, single = _as_batch(state)
    out = solve_rk45(lambda t, yy: cr3bp_rhs(t, yy, p), y, dt, rtol=tol, atol=tol)
    if isinstance(state, SynodicState):
        return SynodicState.from_array(out[0])
    return out[0] if single else out


# --- observer frame chain -------------------------------------------------


def _rotz_apply(theta, v: np.ndarray) -> np.ndarray:
    """Rotate vectors (..., 3) by ``theta`` about +z."""
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty_like(v)
    out[..., 0] = c * v[..., 0] - s * v[..., 1]
    out[..., 1] = s * v[..., 0] + c * v[..., 1]
    out[..., 2] = v[..., 2]
    return out


def _zcross(v: np.ndarray) -> np.ndarray:
    """z-hat cross v."""
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    out[..., 2] = 0.0
    return out


def _site_and_enu(p: SystemParams) -> tuple[np.ndarray, np.ndarray]:
    lat, lon = p.observer_lat_rad, p.observer_lon_rad
    cl, sl = math.cos(lat), math.sin(lat)
    co, so = math.cos(lon), math.sin(lon)
    site = (EARTH_RADIUS_KM + p.observer_alt_km) * np.array([cl * co, cl * so, sl])
    enu = np.array(
        [
            [-so, co, 0.0],
            [-sl * co, -sl * so, cl],
            [cl * co, cl * so, sl],
        ]
    )
    return site, enu


def synodic_to_topocentric(state, epoch: Epoch, p: SystemParams):
    """Map synodic nondimensional state(s) to observer-relative km, km/s."""
    y, single = _as_batch(state)
    t = np.asarray(epoch, dtype=float)
    L, V = p.l_star_km, p.v_star_km_s
    omega_syn = 1.0 / p.t_star_s  # rad/s

    r = y[..., :3] * L
    v = y[..., 3:] * V

    # Synodic -> barycentric inertial (theta = t, omega x r transport).
    theta = t
    r_i = _rotz_apply(theta, r)
    v_i = _rotz_apply(theta, v + omega_syn * _zcross(r))

    # Barycenter -> Earth center. Earth sits at synodic (-mu, 0, 0).
    r_e = np.array([-p.mu * L, 0.0, 0.0])
    r_e_i = _rotz_apply(theta, np.broadcast_to(r_e, r.shape))
    v_e_i = _rotz_apply(theta, omega_syn * _zcross(np.broadcast_to(r_e, r.shape)))
    r_g = r_i - r_e_i
    v_g = v_i - v_e_i

    # Inertial -> Earth-fixed.
    alpha = p.spin_angle0_rad + p.omega_earth_rad_s * (t * p.t_star_s)
    r_f = _rotz_apply(-alpha, r_g)
    v_f = _rotz_apply(-alpha, v_g) - p.omega_earth_rad_s * _zcross(r_f)

    # Earth-fixed -> site-relative east-north-up.
    site, enu = _site_and_enu(p)
    r_t = (r_f - site) @ enu.T
    v_t = v_f @ enu.T

    out = np.concatenate([r_t, v_t], axis=-1)
    if isinstance(state, SynodicState):
        return TopocentricState.from_array(out[0])
    return out[0] if single else out


def topocentric_to_synodic(state, epoch: Epoch, p: SystemParams):
    """Exact inverse of :func:`synodic_to_topocentric`."""
    y, single = _as_batch(state)
    t = np.asarray(epoch, dtype=float)
    L, V = p.l_star_km, p.v_star_km_s
    omega_syn = 1.0 / p.t_star_s

    site, enu = _site_and_enu(p)
    r_f = y[..., :3] @ enu + site
    v_f = y[..., 3:] @ enu

    alpha = p.spin_angle0_rad + p.omega_earth_rad_s * (t * p.t_star_s)
    r_g = _rotz_apply(alpha, r_f)
    v_g = _rotz_apply(alpha, v_f + p.omega_earth_rad_s * _zcross(r_f))

    theta = t
    r_e = np.array([-p.mu * L, 0.0, 0.0])
    r_e_i = _rotz_apply(theta, np.broadcast_to(r_e, r_g.shape))
    v_e_i = _rotz_apply(theta, omega_syn * _zcross(np.broadcast_to(r_e, r_g.shape)))
    r_i = r_g + r_e_i
    v_i = v_g + v_e_i

    r = _rotz_apply(-theta, r_i)
    v = _rotz_apply(-theta, v_i) - omega_syn * _zcross(r)

    out = np.concatenate([r / L, v / V], axis=-1)
    if isinstance(state, TopocentricState):
        return SynodicState.from_array(out[0])
    return out[0] if single else out

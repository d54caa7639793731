"""Truth generation on the 9:2 NRHO and observation scheduling.

The stored initial condition was produced by the single-shooting corrector
in this module (perpendicular x-z plane crossings, period pinned to two
synodic months over nine revolutions) and is re-validated against it on
first use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import gmm as gm
from .dynamics import (
    SynodicState,
    SystemParams,
    propagate,
    synodic_to_topocentric,
    topocentric_to_synodic,
)
from .observation import (
    Measurement,
    VisibilityPolicy,
    default_noise_cov,
    synthesize,
    visible,
)

__all__ = [
    "NrhoValidationError",
    "NeverVisibleError",
    "NRHO_92_STATE",
    "NRHO_92_PERIOD",
    "ScenarioConfig",
    "ScenarioData",
    "refine_halo",
    "default_nrho",
    "build_scenario",
    "cluster_box_prior",
    "default_box",
]

# 9:2 L2 southern NRHO: y = 0 apolune crossing, period = 2 synodic
# months / 9 = 1.5111987 nondim. Produced by refine_halo below.
NRHO_92_STATE = (
    1.0220281587304691,
    0.0,
    -0.1821013569081116,
    0.0,
    -0.1032708277844135,
    0.0,
)
NRHO_92_PERIOD = 1.5111987103556654

_CLOSURE_TOL = 1e-6


class NrhoValidationError(RuntimeError):
    """Stored orbit constants fail the re-propagation closure check."""


class NeverVisibleError(RuntimeError):
    """Epoch-zero geometry keeps the target below the mask over the scan."""


def _half_period_residual(x0: float, z0: float, vy0: float, t_half: float,
                          p: SystemParams, tol: float) -> np.ndarray:
    ic = np.array([x0, 0.0, z0, 0.0, vy0, 0.0])
    out = propagate(ic, t_half, p, tol=tol)
    return np.array([out[1], out[3], out[5]])


def refine_halo(x0: float, z0: float, vy0: float, period: float,
                p: SystemParams, tol: float = 1e-12, max_iter: int = 30
                ) -> tuple[np.ndarray, float]:
    """Single-shooting correction of a halo seed at fixed x0.

    Adjusts (z0, vy0, half-period) by Newton iteration with finite-difference
    sensitivities until the half-period x-z plane crossing is perpendicular.
    Returns the corrected initial state and full period.
    """
    u = np.array([z0, vy0, period / 2.0])
    f = _half_period_residual(x0, *u, p, tol)
    for _ in range(max_iter):
        if np.max(np.abs(f)) < 1e-12:
            break
        jac = np.zeros((3, 3))
        for j in range(3):
            du = np.zeros(3)
            du[j] = 1e-7 * max(1.0, abs(u[j]))
            fp = _half_period_residual(x0, *(u + du), p, tol)
            jac[:, j] = (fp - f) / du[j]
        u = u - np.linalg.solve(jac, f)
        f = _half_period_residual(x0, *u, p, tol)
    else:
        raise NrhoValidationError("halo corrector failed to converge")
    ic = np.array([x0, 0.0, u[0], 0.0, u[1], 0.0])
    return ic, 2.0 * u[2]


@lru_cache(maxsize=4)
def _validated_nrho(mu: float, l_star: float, t_star: float
                    ) -> tuple[np.ndarray, float]:
    p = SystemParams(mu=mu, l_star_km=l_star, t_star_s=t_star)
    ic = np.array(NRHO_92_STATE)
    out = propagate(ic, NRHO_92_PERIOD, p, tol=1e-12)
    miss = float(np.max(np.abs(out - ic)))
    if miss > _CLOSURE_TOL:
        raise NrhoValidationError(
            f"stored NRHO closure {miss:.3e} exceeds {_CLOSURE_TOL:.0e}"
        )
    return ic, NRHO_92_PERIOD


def default_nrho(p: SystemParams | None = None) -> tuple[SynodicState, float]:
    """Stored 9:2 NRHO initial condition and period, closure-validated."""
    p = p or SystemParams()
    ic, period = _validated_nrho(p.mu, p.l_star_km, p.t_star_s)
    return SynodicState.from_array(ic), period


def default_box(position_km: float = 550000.0,
                velocity_km_s: float = 100.0) -> gm.UniformBox:
    """Cislunar bootstrap box: +-550000 km and +-100 km/s, topocentric."""
    half = np.array([position_km] * 3 + [velocity_km_s] * 3)
    return gm.UniformBox(lower=-half, upper=half)


@dataclass(frozen=True)
class ScenarioConfig:
    """Single-pass tracking scenario for the default NRHO target."""

    nrho_initial: np.ndarray | None = None
    cadence: float = 40.0 * 60.0 / 375190.26195184357  # 40 min, nondim
    max_steps: int = 20
    visibility: VisibilityPolicy = field(default_factory=VisibilityPolicy)
    noise_cov: np.ndarray = field(default_factory=default_noise_cov)
    scan_steps: int = 64

    def __post_init__(self):
        if self.cadence <= 0.0:
            raise ValueError("cadence must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass(frozen=True)
class ScenarioData:
    """Aligned truth states and synthesized measurements for one pass."""

    truth: np.ndarray            # (M, 6) synodic states at measurement epochs
    epochs: np.ndarray           # (M,) nondim
    measurements: list[Measurement]
    pass_start: float
    pass_end: float

    def __post_init__(self):
        if len(self.measurements) != self.truth.shape[0]:
            raise ValueError("truth and measurement sequences must align")


def build_scenario(cfg: ScenarioConfig, p: SystemParams,
                   rng: np.random.Generator) -> ScenarioData:
    """Step truth at the cadence; emit measurements while the target is up.

    Scans forward from epoch 0 for first visibility, then synthesizes one
    measurement per cadence step until the target sets or ``max_steps``.
    """
    if cfg.nrho_initial is not None:
        state = np.asarray(cfg.nrho_initial, dtype=float).copy()
    else:
        state = default_nrho(p)[0].array
    t = 0.0

    first = None
    for _ in range(cfg.scan_steps):
        topo = synodic_to_topocentric(state, t, p)
        if visible(topo, cfg.visibility):
            first = t
            break
        state = propagate(state, cfg.cadence, p, tol=1e-12)
        t += cfg.cadence
    if first is None:
        raise NeverVisibleError(
            f"target never rose above the mask in the first "
            f"{cfg.scan_steps} cadence steps "
            f"({cfg.scan_steps * cfg.cadence:.4f} nondim)"
        )

    truth_states, epochs, measurements = [], [], []
    while len(measurements) < cfg.max_steps:
        topo = synodic_to_topocentric(state, t, p)
        if not visible(topo, cfg.visibility):
            break
        truth_states.append(state.copy())
        epochs.append(t)
        measurements.append(synthesize(topo, t, cfg.noise_cov, rng))
        state = propagate(state, cfg.cadence, p, tol=1e-12)
        t += cfg.cadence

    return ScenarioData(
        truth=np.array(truth_states),
        epochs=np.array(epochs),
        measurements=measurements,
        pass_start=first,
        pass_end=epochs[-1] if epochs else first,
    )


def cluster_box_prior(box: gm.UniformBox, p: SystemParams, epoch: float,
                      k: int = 6, n: int = 100_000,
                      rng: np.random.Generator | None = None) -> gm.Gmm:
    """Sample the box, map into the synodic frame, and cluster into k parts.

    This is the PGM-I-only baseline prior: the uniform cloud approximated
    by a six-component mixture.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    cloud = gm.box_sample(box, n, rng, epoch=epoch)
    states = topocentric_to_synodic(cloud.states, epoch, p)
    ens = gm.ParticleEnsemble(states, cloud.weights, frame="synodic",
                              epoch=epoch)
    return gm.cluster(ens, k, rng)

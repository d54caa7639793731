"""Shared filter machinery: ensemble propagation, weight update, resampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gmm as gm
from .dynamics import SystemParams, propagate
from .observation import Measurement

__all__ = [
    "AllLikelihoodsZeroError",
    "FilterStepInput",
    "ProcessNoise",
    "propagate_ensemble",
    "update_weights",
    "resample_posterior",
]


class AllLikelihoodsZeroError(RuntimeError):
    """Every component likelihood vanished: the filter has diverged."""


@dataclass(frozen=True)
class ProcessNoise:
    """Per-step Gaussian jitter, nondimensional units."""

    pos_sigma: float = 1e-8
    vel_sigma: float = 1e-8

    def __post_init__(self):
        if self.pos_sigma < 0.0 or self.vel_sigma < 0.0:
            raise ValueError("process noise sigmas must be >= 0")

    @property
    def is_zero(self) -> bool:
        return self.pos_sigma == 0.0 and self.vel_sigma == 0.0


@dataclass(frozen=True)
class FilterStepInput:
    """Propagated prior particles paired with the measurement to fuse."""

    prior_particles: gm.ParticleEnsemble
    measurement: Measurement
    step_index: int = 0

    def __post_init__(self):
        if self.prior_particles.epoch != self.measurement.epoch:
            raise ValueError(
                "particles must be propagated to the measurement epoch"
            )


def propagate_ensemble(e: gm.ParticleEnsemble, dt: float, p: SystemParams,
                       q: ProcessNoise, rng: np.random.Generator,
                       tol: float = 1e-12) -> gm.ParticleEnsemble:
    """Propagate every particle by dt, then add independent Gaussian jitter.

    Weights are unchanged; with zero process noise the output states equal
    per-particle :func:`cispgm.dynamics.propagate` results exactly.
    """
    if dt < 0.0:
        raise ValueError("dt must be >= 0")
    if e.frame != "synodic":
        raise gm.FrameMismatchError("can only propagate synodic ensembles")
    states = propagate(e.states, dt, p, tol=tol) if dt > 0.0 else e.states.copy()
    if not q.is_zero:
        sig = np.array([q.pos_sigma] * 3 + [q.vel_sigma] * 3)
        states = states + rng.standard_normal(states.shape) * sig
    return gm.ParticleEnsemble(states, e.weights.copy(), frame=e.frame,
                               epoch=e.epoch + dt, lineage=e.lineage)


def update_weights(prior_weights: np.ndarray,
                   log_likelihoods: np.ndarray) -> np.ndarray:
    """Bayes weight update in log space; invariant to likelihood shifts."""
    w = np.asarray(prior_weights, dtype=float).reshape(-1)
    ll = np.asarray(log_likelihoods, dtype=float).reshape(-1)
    if w.shape != ll.shape:
        raise ValueError("weights and log-likelihoods must match in length")
    with np.errstate(divide="ignore"):
        a = np.where(w > 0.0, np.log(np.where(w > 0.0, w, 1.0)), -np.inf) + ll
    if not np.any(np.isfinite(a)):
        raise AllLikelihoodsZeroError(
            "all posterior weights vanished (loss of custody)"
        )
    m = np.max(a[np.isfinite(a)])
    e = np.exp(a - m)
    out = e / e.sum()
    return out / out.sum()


def resample_posterior(g: gm.Gmm, n: int, rng: np.random.Generator,
                       epoch: float, frame: str = "synodic",
                       lineage: str = "") -> gm.ParticleEnsemble:
    """Draw a fresh uniform-weight ensemble from the posterior mixture."""
    return gm.sample(g, n, rng, frame=frame, epoch=epoch, lineage=lineage)

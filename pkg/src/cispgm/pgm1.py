"""PGM-I filter step: cluster, per-component ensemble Kalman update, reweight.

The measurement update is a stochastic (perturbed-observation) EnKF run on
the particles assigned to each cluster. Component likelihoods come from the
Gaussian innovation model at the member-mean predicted measurement and feed
the discrete weight update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import gmm as gm
from .dynamics import SystemParams, synodic_to_topocentric
from .observation import Measurement, measure, wrap_angle
from .pgm_core import FilterStepInput, update_weights

__all__ = [
    "LossOfCustodyError",
    "SingularInnovationError",
    "Pgm1Config",
    "MeasurementModel",
    "angles_model",
    "enkf_update",
    "enkf_component_update",
    "pgm1_step",
    "ComponentDiagnostics",
]


class LossOfCustodyError(RuntimeError):
    """Every mixture component was pruned; the filter lost the target."""


class SingularInnovationError(np.linalg.LinAlgError):
    """Innovation covariance is numerically singular."""


@dataclass(frozen=True)
class Pgm1Config:
    n_clusters: int = 6
    min_component_weight: float = 1e-6

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if not 0.0 <= self.min_component_weight <= 0.1:
            raise ValueError("min_component_weight must lie in [0, 0.1]")


@dataclass(frozen=True)
class MeasurementModel:
    """Observation operator h plus its noise covariance and wrap flags."""

    h: Callable[[np.ndarray], np.ndarray]
    noise_cov: np.ndarray
    angular: tuple[bool, ...]

    @property
    def dim(self) -> int:
        return len(self.angular)


def angles_model(z: Measurement, p: SystemParams) -> MeasurementModel:
    """Azimuth/elevation of synodic states through the frame chain."""

    def h(states: np.ndarray) -> np.ndarray:
        return measure(synodic_to_topocentric(states, z.epoch, p))

    return MeasurementModel(h=h, noise_cov=z.noise_cov, angular=(True, False))


def _wrapped_mean(values: np.ndarray, weights: np.ndarray,
                  angular: tuple[bool, ...]) -> np.ndarray:
    """Weighted mean with angular dimensions averaged about a reference."""
    out = np.empty(values.shape[1])
    for d in range(values.shape[1]):
        col = values[:, d]
        if angular[d]:
            ref = col[0]
            out[d] = wrap_angle(ref + weights @ wrap_angle(col - ref))
        else:
            out[d] = weights @ col
    return out


def _wrapped_dev(values: np.ndarray, center: np.ndarray,
                 angular: tuple[bool, ...]) -> np.ndarray:
    dev = values - center
    for d in range(values.shape[1]):
        if angular[d]:
            dev[:, d] = wrap_angle(dev[:, d])
    return dev


def enkf_update(states: np.ndarray, weights: np.ndarray, z_vec: np.ndarray,
                model: MeasurementModel, rng: np.random.Generator
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Stochastic EnKF with perturbed observations on one member cloud.

    Returns (updated states, posterior mean, posterior cov, log component
    likelihood). Requires at least two members so covariances are estimable.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    m = states.shape[0]
    if m < 2:
        raise ValueError("EnKF update needs at least two members")
    w = np.asarray(weights, dtype=float).reshape(-1)
    w = w / w.sum()

    predicted = model.h(states)
    zbar = _wrapped_mean(predicted, w, model.angular)
    dz = _wrapped_dev(predicted, zbar, model.angular)
    xbar = w @ states
    dx = states - xbar

    r_cov = np.asarray(model.noise_cov, dtype=float)
    s_zz = (dz * w[:, None]).T @ dz
    p_zz = s_zz + r_cov
    p_xz = (dx * w[:, None]).T @ dz
    try:
        gain = np.linalg.solve(p_zz, p_xz.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationError(str(exc)) from exc

    # Perturbed observations keep the posterior spread statistically honest.
    noise = rng.standard_normal((m, model.dim)) @ np.linalg.cholesky(r_cov).T
    innov = _wrapped_dev(np.broadcast_to(z_vec, predicted.shape), zbar,
                         model.angular)
    innov = innov - dz + noise
    updated = states + innov @ gain.T

    mean = w @ updated
    dev = updated - mean
    cov = (dev * w[:, None]).T @ dev
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov)[0] < gm.COV_EPS:
        cov = cov + gm.COV_EPS * np.eye(states.shape[1])

    resid = _wrapped_dev(z_vec[None, :], zbar, model.angular)[0]
    chol = np.linalg.cholesky(p_zz)
    quad = float(np.sum(np.linalg.solve(chol, resid) ** 2))
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    loglik = -0.5 * (model.dim * math.log(2.0 * math.pi) + logdet + quad)
    return updated, mean, cov, loglik


def enkf_component_update(members: gm.ParticleEnsemble, z: Measurement,
                          p: SystemParams, rng: np.random.Generator,
                          model: MeasurementModel | None = None
                          ) -> tuple[gm.ParticleEnsemble, np.ndarray, np.ndarray, float]:
    """EnKF update of one cluster's members against one measurement."""
    if model is None:
        if members.epoch != z.epoch:
            raise ValueError("members must sit at the measurement epoch")
        model = angles_model(z, p)
    updated, mean, cov, loglik = enkf_update(
        members.states, members.weights, z.vector, model, rng
    )
    out = gm.ParticleEnsemble(updated, members.weights.copy(),
                              frame=members.frame, epoch=members.epoch,
                              lineage=members.lineage)
    return out, mean, cov, loglik


@dataclass(frozen=True)
class ComponentDiagnostics:
    component: int
    weight: float
    n_members: int
    innovation_norm: float
    loglik: float


def pgm1_step(inp: FilterStepInput, cfg: Pgm1Config, p: SystemParams,
              rng: np.random.Generator,
              model: MeasurementModel | None = None,
              n_resample: int | None = None
              ) -> tuple[gm.Gmm, gm.ParticleEnsemble, list[ComponentDiagnostics]]:
    """One PGM-I iteration on particles already at the measurement epoch."""
    e = inp.prior_particles
    z = inp.measurement
    if model is None:
        model = angles_model(z, p)
    k = min(cfg.n_clusters, e.n)
    rng_cluster, rng_update, rng_resample = rng.spawn(3)
    prior, labels = gm.cluster_assign(e, k, rng_cluster)

    update_rngs = rng_update.spawn(prior.n_components)
    means, covs, logliks, diags = [], [], [], []
    for j in range(prior.n_components):
        idx = np.flatnonzero(labels == j)
        if idx.size >= 2:
            _, mean, cov, loglik = enkf_update(
                e.states[idx], e.weights[idx], z.vector, model, update_rngs[j]
            )
        else:
            # Too few members to estimate covariances: fall back to the
            # fitted prior moments and an R-only innovation model.
            _, mean, cov = gm.fit_gaussian(e, idx)
            pred = model.h(e.states[idx])
            resid = _wrapped_dev(z.vector[None, :], pred[0], model.angular)[0]
            chol = np.linalg.cholesky(np.asarray(model.noise_cov))
            quad = float(np.sum(np.linalg.solve(chol, resid) ** 2))
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            loglik = -0.5 * (model.dim * math.log(2.0 * math.pi)
                             + logdet + quad)
        means.append(mean)
        covs.append(cov)
        logliks.append(loglik)

    new_w = update_weights(prior.weights, np.array(logliks))
    keep = new_w >= cfg.min_component_weight
    if not np.any(keep):
        raise LossOfCustodyError(
            f"all {prior.n_components} components fell below the weight floor"
        )
    posterior = gm.Gmm(new_w[keep], np.array(means)[keep], np.array(covs)[keep])

    for j in range(prior.n_components):
        idx = np.flatnonzero(labels == j)
        pred = model.h(e.states[idx]) if idx.size else np.zeros((0, model.dim))
        zb = (_wrapped_mean(pred, e.weights[idx] / e.weights[idx].sum(),
                            model.angular) if idx.size else z.vector)
        inn = _wrapped_dev(z.vector[None, :], zb, model.angular)[0]
        diags.append(ComponentDiagnostics(
            component=j, weight=float(new_w[j]), n_members=int(idx.size),
            innovation_norm=float(np.linalg.norm(inn)), loglik=float(logliks[j]),
        ))

    n_out = n_resample if n_resample is not None else e.n
    ensemble = gm.sample(posterior, n_out, rng_resample, frame=e.frame,
                         epoch=z.epoch, lineage=e.lineage)
    return posterior, ensemble, diags

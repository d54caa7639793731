"""PGM-II filter step: per-component Metropolis sampling of the posterior,
burn-in/thinning, ensemble clustering, and harmonic-mean component
likelihoods feeding the discrete weight update.

The prior component may be a Gaussian or, for the bootstrap step, a uniform
box over the cislunar volume; the sampler never assumes the prior is
Gaussian. Chains walk in synodic nondimensional coordinates; measurement
geometry is evaluated through the frame chain at the measurement epoch.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.special import logsumexp

from . import gmm as gm
from .dynamics import SystemParams, synodic_to_topocentric
from .observation import Measurement, wrap_angle
from .pgm_core import update_weights

__all__ = [
    "InitOutsideSupportError",
    "InitializationFailureError",
    "LossOfCustodyError",
    "McmcConfig",
    "GaussianPrior",
    "PriorComponent",
    "McmcEnsemble",
    "ComponentDiagnostics",
    "measurement_log_likelihoods",
    "target_log_density",
    "metropolis_chain",
    "sample_component_posterior",
    "harmonic_mean_log_likelihood",
    "ensemble_likelihood",
    "pgm2_step",
]

_MIN_RANGE_KM = 1e-6


class InitOutsideSupportError(ValueError):
    """Chain start has zero target density."""


class InitializationFailureError(RuntimeError):
    """No valid chain start found; measurement inconsistent with component."""


class LossOfCustodyError(RuntimeError):
    """Every prior component failed to produce a posterior ensemble."""


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 24
    chain_length: int = 20000
    burn_in: int = 5000
    thin: int = 500
    proposal_scale: float = 2.38**2 / 6.0

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.chain_length <= self.burn_in:
            raise ValueError("chain_length must exceed burn_in")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.proposal_scale <= 0.0:
            raise ValueError("proposal_scale must be positive")

    @property
    def retained_per_chain(self) -> int:
        return (self.chain_length - self.burn_in) // self.thin


@dataclass(frozen=True)
class GaussianPrior:
    """One Gaussian prior component in synodic nondimensional coordinates."""

    mean: np.ndarray
    cov: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))


PriorComponent = Union[GaussianPrior, gm.UniformBox]


@dataclass(frozen=True)
class McmcEnsemble:
    """Pooled decorrelated posterior samples for one prior component."""

    samples: np.ndarray
    acceptance_rate: float
    component: int = -1

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if s.shape[0] < 1:
            raise ValueError("ensemble must hold at least one sample")
        object.__setattr__(self, "samples", s)

    @property
    def n(self) -> int:
        return self.samples.shape[0]


def measurement_log_likelihoods(z: Measurement, states: np.ndarray,
                                p: SystemParams) -> np.ndarray:
    """Vectorized angle log likelihood of synodic states; -inf at zero range."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    topo = synodic_to_topocentric(states, z.epoch, p)
    rho = np.sqrt(np.sum(topo[:, :3] ** 2, axis=1))
    ok = rho >= _MIN_RANGE_KM
    safe_rho = np.where(ok, rho, 1.0)
    az = np.arctan2(topo[:, 1], topo[:, 0])
    el = np.arcsin(np.clip(topo[:, 2] / safe_rho, -1.0, 1.0))
    resid = np.stack([wrap_angle(z.az - az), z.el - el], axis=1)
    chol = np.linalg.cholesky(z.noise_cov)
    w = np.linalg.solve(chol, resid.T)
    quad = np.sum(w**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    ll = -0.5 * (2.0 * math.log(2.0 * math.pi) + logdet + quad)
    return np.where(ok, ll, -np.inf)


def _gaussian_log_pdf(mean: np.ndarray, cov: np.ndarray,
                      x: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(x)
    chol = np.linalg.cholesky(cov)
    dev = pts - mean
    w = np.linalg.solve(chol, dev.T)
    quad = np.sum(w**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (mean.size * math.log(2.0 * math.pi) + logdet + quad)


def prior_log_density(prior: PriorComponent, states: np.ndarray, z_epoch: float,
                      p: SystemParams) -> np.ndarray:
    """Prior component log density at synodic states; -inf outside a box."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if isinstance(prior, GaussianPrior):
        return _gaussian_log_pdf(prior.mean, prior.cov, states)
    topo = synodic_to_topocentric(states, z_epoch, p)
    inside = gm.box_contains(prior, topo)
    inside = np.atleast_1d(inside)
    return np.where(inside, gm.box_log_density(prior), -np.inf)


def target_log_density(prior: PriorComponent, z: Measurement, x,
                       p: SystemParams) -> float | np.ndarray:
    """Unnormalized log posterior: prior density plus angle likelihood."""
    states = np.atleast_2d(np.asarray(x, dtype=float))
    lp = prior_log_density(prior, states, z.epoch, p)
    ll = measurement_log_likelihoods(z, states, p)
    out = lp + ll
    return float(out[0]) if np.asarray(x).ndim == 1 else out


def _run_block(target: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
               lt: np.ndarray, chol: np.ndarray, scale: float, n: int,
               rng: np.random.Generator, record_every: int = 0,
               ) -> tuple[np.ndarray, np.ndarray, int, list[np.ndarray]]:
    """Advance all chains n lockstep Metropolis steps with a shared proposal."""
    accepted = 0
    snapshots: list[np.ndarray] = []
    for i in range(1, n + 1):
        step = rng.standard_normal(x.shape) @ chol.T * scale
        prop = x + step
        lt_prop = target(prop)
        logu = np.log(rng.random(x.shape[0]))
        with np.errstate(invalid="ignore"):
            acc = logu < (lt_prop - lt)
        acc = acc & np.isfinite(lt_prop)
        x = np.where(acc[:, None], prop, x)
        lt = np.where(acc, lt_prop, lt)
        accepted += int(np.count_nonzero(acc))
        if record_every and i % record_every == 0:
            snapshots.append(x.copy())
    return x, lt, accepted, snapshots


def metropolis_chain(target: Callable, init: np.ndarray,
                     proposal_cov: np.ndarray, n: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Random-walk Metropolis with a fixed Gaussian proposal.

    Returns the chain of n states (one per iteration) and the accept count.
    ``target`` maps an (N, D) batch to (N,) log densities.
    """
    init = np.asarray(init, dtype=float).reshape(1, -1)
    lt = np.atleast_1d(target(init))
    if not np.isfinite(lt[0]):
        raise InitOutsideSupportError("chain start has zero target density")
    chol = np.linalg.cholesky(np.asarray(proposal_cov, dtype=float))
    x = init.copy()
    out = np.empty((n, init.shape[1]))
    accepted = 0
    for i in range(n):
        x, lt, acc, _ = _run_block(target, x, lt, chol, 1.0, 1, rng)
        accepted += acc
        out[i] = x[0]
    return out, accepted


def _box_proposal_diag(box: gm.UniformBox, p: SystemParams) -> np.ndarray:
    """Nondimensionalized uniform-moment diagonal for the box proposal."""
    w = box.widths.copy()
    w[:3] /= p.l_star_km
    w[3:] /= p.v_star_km_s
    return np.diag(w**2 / 12.0)


def _draw_overdispersed(prior: PriorComponent, count: int,
                        rng: np.random.Generator, z_epoch: float,
                        p: SystemParams) -> np.ndarray:
    if isinstance(prior, GaussianPrior):
        chol = np.linalg.cholesky(prior.cov)
        z = rng.standard_normal((count, prior.mean.size))
        return prior.mean + 1.5 * z @ chol.T
    from .dynamics import topocentric_to_synodic

    u = rng.random((count, prior.dim))
    topo = prior.lower + u * prior.widths
    return topocentric_to_synodic(topo, z_epoch, p)


_ADAPT_WINDOW = 50
_ADAPT_GAIN = 1.0
_TARGET_ACCEPT = 0.3
_SNAPSHOT_EVERY = 5


def sample_component_posterior(prior: PriorComponent, z: Measurement,
                               cfg: McmcConfig, p: SystemParams,
                               rng: np.random.Generator,
                               component: int = -1) -> McmcEnsemble:
    """Sample one component posterior with parallel adaptive-burn-in chains.

    The proposal covariance starts at ``proposal_scale`` times the prior
    component covariance (uniform-moment diagonal for a box). During burn-in
    only, a scalar step multiplier tracks a 20-40% acceptance target and the
    covariance is re-estimated twice from pooled recent chain states; the
    proposal is frozen afterwards, so retained samples come from a valid
    Metropolis kernel.
    """
    def target(states: np.ndarray) -> np.ndarray:
        return target_log_density(prior, z, states, p)

    # Rejection-resample overdispersed prior draws until the target is finite.
    inits = np.empty((cfg.n_chains, 6))
    found = 0
    attempts = 0
    while found < cfg.n_chains:
        block = max(cfg.n_chains, 128)
        draws = _draw_overdispersed(prior, block, rng, z.epoch, p)
        fin = np.isfinite(target(draws))
        good = draws[fin]
        take = min(good.shape[0], cfg.n_chains - found)
        inits[found:found + take] = good[:take]
        found += take
        attempts += block
        if attempts >= 100_000 and found < cfg.n_chains:
            raise InitializationFailureError(
                f"no valid chain start in {attempts} prior draws"
            )

    if isinstance(prior, GaussianPrior):
        base_cov = prior.cov.copy()
    else:
        base_cov = _box_proposal_diag(prior, p)
    chol = np.linalg.cholesky(cfg.proposal_scale * base_cov)

    x = inits
    lt = target(x)
    log_s = 0.0
    checkpoints = {cfg.burn_in // 2, (17 * cfg.burn_in) // 20}
    buffer: list[np.ndarray] = []
    done = 0
    while done < cfg.burn_in:
        n_block = min(_ADAPT_WINDOW, cfg.burn_in - done)
        x, lt, acc, snaps = _run_block(
            target, x, lt, chol, math.exp(0.5 * log_s), n_block, rng,
            record_every=_SNAPSHOT_EVERY,
        )
        buffer.extend(snaps)
        rate = acc / (n_block * cfg.n_chains)
        log_s = float(np.clip(log_s + _ADAPT_GAIN * (rate - _TARGET_ACCEPT),
                              -40.0, 10.0))
        done += n_block
        if any(done >= c > done - n_block for c in checkpoints) and buffer:
            pool = np.concatenate(buffer, axis=0)
            dev = pool - pool.mean(axis=0)
            emp = dev.T @ dev / pool.shape[0]
            tr = float(np.trace(emp))
            if tr > 0.0:
                emp = emp + 1e-10 * (tr / 6.0) * np.eye(6)
                try:
                    chol = np.linalg.cholesky(cfg.proposal_scale * emp)
                    log_s = 0.0
                except np.linalg.LinAlgError:
                    pass
            buffer.clear()

    frozen = chol * math.exp(0.5 * log_s)
    n_keep = cfg.retained_per_chain
    kept = np.empty((n_keep, cfg.n_chains, 6))
    accepted = 0
    remaining = cfg.chain_length - cfg.burn_in
    for j in range(n_keep):
        x, lt, acc, _ = _run_block(target, x, lt, frozen, 1.0, cfg.thin, rng)
        accepted += acc
        kept[j] = x
    tail = remaining - n_keep * cfg.thin
    if tail > 0:
        x, lt, acc, _ = _run_block(target, x, lt, frozen, 1.0, tail, rng)
        accepted += acc

    samples = kept.transpose(1, 0, 2).reshape(-1, 6)
    rate = accepted / (remaining * cfg.n_chains)
    return McmcEnsemble(samples=samples, acceptance_rate=float(rate),
                        component=component)


def harmonic_mean_log_likelihood(log_liks: np.ndarray) -> float:
    """log of the harmonic-mean evidence: S / sum(1/l_s), all in log space."""
    ll = np.asarray(log_liks, dtype=float).reshape(-1)
    if ll.size == 0:
        raise ValueError("need at least one sample")
    return float(math.log(ll.size) - logsumexp(-ll))


def ensemble_likelihood(a: McmcEnsemble, prior: PriorComponent,
                        z: Measurement, p: SystemParams) -> float:
    """Harmonic-mean estimate of the component likelihood l_i(z).

    With the auxiliary density chosen equal to the prior component, the
    prior factors cancel on its support and only measurement likelihoods
    at the retained samples remain.
    """
    del prior  # cancellation leaves no prior dependence on the support
    ll = measurement_log_likelihoods(z, a.samples, p)
    return harmonic_mean_log_likelihood(ll)


@dataclass(frozen=True)
class ComponentDiagnostics:
    component: int
    acceptance_rate: float
    retained_samples: int
    log_likelihood: float
    n_clusters: int


def pgm2_step(z: Measurement, prior: gm.Gmm | gm.UniformBox, cfg: McmcConfig,
              p: SystemParams, rng: np.random.Generator, n_resample: int,
              cluster_max_k: int = 6, threads: int = 1
              ) -> tuple[gm.Gmm, gm.ParticleEnsemble, list[ComponentDiagnostics]]:
    """One PGM-II update against a Gaussian mixture or uniform-box prior."""
    if isinstance(prior, gm.UniformBox):
        components: list[PriorComponent] = [prior]
        prior_weights = np.array([1.0])
    else:
        components = [
            GaussianPrior(mean=prior.means[i], cov=prior.covs[i],
                          weight=float(prior.weights[i]))
            for i in range(prior.n_components)
        ]
        prior_weights = prior.weights.copy()

    rngs = rng.spawn(len(components) + 1)
    comp_rngs, resample_rng = rngs[:-1], rngs[-1]

    def run_one(i: int):
        sub_rng = comp_rngs[i].spawn(2)
        try:
            ens = sample_component_posterior(components[i], z, cfg, p,
                                             sub_rng[0], component=i)
        except InitializationFailureError:
            return None
        loglik = ensemble_likelihood(ens, components[i], z, p)
        pool = gm.ParticleEnsemble.uniform(ens.samples, frame="synodic",
                                           epoch=z.epoch)
        k = gm.choose_cluster_count(pool, cluster_max_k, sub_rng[1])
        sub = gm.cluster(pool, k, sub_rng[1])
        return ens, loglik, sub

    if threads > 1 and len(components) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, range(len(components))))
    else:
        results = [run_one(i) for i in range(len(components))]

    if all(r is None for r in results):
        raise LossOfCustodyError("every prior component failed to initialize")

    logliks = np.array([r[1] if r is not None else -np.inf for r in results])
    post_w = update_weights(prior_weights, logliks)

    weights, means, covs, diags = [], [], [], []
    for i, r in enumerate(results):
        if r is None:
            diags.append(ComponentDiagnostics(i, 0.0, 0, float("-inf"), 0))
            continue
        ens, loglik, sub = r
        diags.append(ComponentDiagnostics(
            i, ens.acceptance_rate, ens.n, float(loglik), sub.n_components
        ))
        if post_w[i] <= 0.0:
            continue
        for m in range(sub.n_components):
            weights.append(post_w[i] * sub.weights[m])
            means.append(sub.means[m])
            covs.append(sub.covs[m])
    if not weights:
        raise LossOfCustodyError("no posterior component retained any weight")

    posterior = gm.Gmm(np.array(weights), np.array(means), np.array(covs))
    ensemble = gm.sample(posterior, n_resample, resample_rng, frame="synodic",
                         epoch=z.epoch)
    return posterior, ensemble, diags

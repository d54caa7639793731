"""Weighted Gaussian mixtures over 6-D state space.

Covers density evaluation, sampling, weighted-moment Gaussian fits,
Mahalanobis-whitened k-means++ clustering of particle clouds, the
particle-based entropy metric, and the uniform-box prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "COV_EPS",
    "EmptyClusterError",
    "FrameMismatchError",
    "Gmm",
    "ParticleEnsemble",
    "UniformBox",
    "log_pdf",
    "sample",
    "fit_gaussian",
    "cluster",
    "cluster_assign",
    "choose_cluster_count",
    "entropy",
    "box_sample",
    "box_contains",
    "box_log_density",
    "mixture_moments",
]

# Floor added to degenerate covariances (nondim-squared units). Large
# enough to keep refits positive definite, small enough not to swamp the
# ~arcsecond transverse geometry that carries the velocity information.
COV_EPS = 1e-12


class EmptyClusterError(ValueError):
    """A Gaussian fit was requested for zero members."""


class FrameMismatchError(ValueError):
    """Particles and density live in different frames."""


@dataclass(frozen=True)
class Gmm:
    """Weighted mixture of multivariate normals.

    Weights are renormalized to sum to one on construction; they must be
    strictly positive. Covariances are symmetrized.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        c = np.asarray(self.covs, dtype=float)
        if c.ndim == 2:
            c = c[None, :, :]
        k, d = m.shape
        if w.shape != (k,) or c.shape != (k, d, d):
            raise ValueError("inconsistent mixture shapes")
        if np.any(w <= 0.0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be positive and finite")
        w = w / w.sum()
        c = 0.5 * (c + np.transpose(c, (0, 2, 1)))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", c)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class ParticleEnsemble:
    """Weighted state samples with a frame tag and common epoch."""

    states: np.ndarray
    weights: np.ndarray
    frame: str = "synodic"
    epoch: float = 0.0
    lineage: str = ""

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.states, dtype=float))
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if s.shape[0] != w.size or s.shape[0] < 1:
            raise ValueError("states/weights shape mismatch")
        if np.any(w < 0.0) or w.sum() <= 0.0:
            raise ValueError("weights must be nonnegative with positive sum")
        w = w / w.sum()
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, states: np.ndarray, frame: str = "synodic",
                epoch: float = 0.0, lineage: str = "") -> "ParticleEnsemble":
        states = np.atleast_2d(np.asarray(states, dtype=float))
        n = states.shape[0]
        return cls(states, np.full(n, 1.0 / n), frame, epoch, lineage)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class UniformBox:
    """Axis-aligned uniform density; by default over topocentric km, km/s."""

    lower: np.ndarray
    upper: np.ndarray
    frame: str = "topocentric"

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("box bounds must satisfy lower < upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower


def _cholesky_all(covs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("mixture covariance not positive definite") from exc


def component_log_pdfs(g: Gmm, x: np.ndarray) -> np.ndarray:
    """Per-component Gaussian log densities; shape (N, K)."""
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    chols = _cholesky_all(g.covs)
    out = np.empty((pts.shape[0], g.n_components))
    const = g.dim * math.log(2.0 * math.pi)
    for j in range(g.n_components):
        dev = pts - g.means[j]
        w = np.linalg.solve(chols[j], dev.T)
        quad = np.sum(w**2, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chols[j])))
        out[:, j] = -0.5 * (const + logdet + quad)
    return out

def log_pdf(g: Gmm, x) -> float | np.ndarray:
    """Mixture log density via per-component Cholesky and log-sum-exp."""
    comp = component_log_pdfs(g, x)
    ll = logsumexp(comp + np.log(g.weights), axis=1)
    return float(ll[0]) if np.asarray(x).ndim == 1 else ll


def sample(g: Gmm, n: int, rng: np.random.Generator,
           frame: str = "synodic", epoch: float = 0.0,
           lineage: str = "") -> ParticleEnsemble:
    """Draw n particles: categorical over weights, then per-component MVN."""
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = rng.choice(g.n_components, size=n, p=g.weights)
    z = rng.standard_normal((n, g.dim))
    chols = _cholesky_all(g.covs)
    states = g.means[idx] + np.einsum("nij,nj->ni", chols[idx], z)
    return ParticleEnsemble.uniform(states, frame=frame, epoch=epoch,
                                    lineage=lineage)


def fit_gaussian(e: ParticleEnsemble, member_indices) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted sample moments of a particle subset (population convention).

    Returns (weight, mean, cov) where weight is the members' share of the
    total ensemble weight. Covariances with smallest eigenvalue below
    ``COV_EPS`` get ``COV_EPS * I`` added.
    """
    idx = np.asarray(member_indices, dtype=int).reshape(-1)
    if idx.size == 0:
        raise EmptyClusterError("cannot fit a Gaussian to zero members")
    pts = e.states[idx]
    w = e.weights[idx]
    wsum = w.sum()
    if wsum <= 0.0:
        raise EmptyClusterError("cluster has zero total weight")
    wn = w / wsum
    mean = wn @ pts
    dev = pts - mean
    cov = (dev * wn[:, None]).T @ dev
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov)[0] < COV_EPS:
        cov = cov + COV_EPS * np.eye(e.dim)
    return float(wsum), mean, cov


def _whiten(e: ParticleEnsemble) -> np.ndarray:
    """Mahalanobis whitening by the ensemble's global weighted covariance."""
    mean = e.weights @ e.states
    dev = e.states - mean
    cov = (dev * e.weights[:, None]).T @ dev
    cov = 0.5 * (cov + cov.T) + COV_EPS * np.eye(e.dim)
    L = np.linalg.cholesky(cov)
    return np.linalg.solve(L, dev.T).T


def _kmeanspp_seed(y: np.ndarray, w: np.ndarray, k: int,
                   rng: np.random.Generator) -> np.ndarray:
    n = y.shape[0]
    centers = np.empty((k, y.shape[1]))
    centers[0] = y[rng.choice(n, p=w)]
    d2 = np.sum((y - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        probs = w * d2
        total = probs.sum()
        if total <= 0.0:
            # All points coincide with existing centers; reuse any point.
            centers[j] = y[rng.choice(n, p=w)]
            continue
        centers[j] = y[rng.choice(n, p=probs / total)]
        d2 = np.minimum(d2, np.sum((y - centers[j]) ** 2, axis=1))
    return centers


def _lloyd(y: np.ndarray, w: np.ndarray, centers: np.ndarray,
           max_iter: int = 100) -> np.ndarray:
    """Weighted Lloyd iterations; returns final assignment labels."""
    labels = None
    for _ in range(max_iter):
        d2 = np.sum((y[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        for j in range(centers.shape[0]):
            mask = new_labels == j
            wsum = w[mask].sum()
            if wsum > 0.0:
                centers[j] = (w[mask] @ y[mask]) / wsum
            else:
                # Re-seed an empty cluster at the farthest point.
                far = int(np.argmax(np.min(d2, axis=1)))
                centers[j] = y[far]
                new_labels[far] = j
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return labels


def cluster_assign(e: ParticleEnsemble, k: int,
                   rng: np.random.Generator) -> tuple[Gmm, np.ndarray]:
    """k-means++ clustering; returns the fitted mixture and member labels."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if e.n < k:
        raise ValueError(f"cannot form {k} clusters from {e.n} particles")
    if k == 1:
        wgt, mean, cov = fit_gaussian(e, np.arange(e.n))
        return Gmm(np.array([wgt]), mean[None], cov[None]), np.zeros(e.n, int)
    y = _whiten(e)
    centers = _kmeanspp_seed(y, e.weights, k, rng)
    labels = _lloyd(y, e.weights, centers)
    weights, means, covs = [], [], []
    remap = np.full(k, -1)
    for j in range(k):
        idx = np.flatnonzero(labels == j)
        if idx.size == 0:
            continue
        wgt, mean, cov = fit_gaussian(e, idx)
        remap[j] = len(weights)
        weights.append(wgt)
        means.append(mean)
        covs.append(cov)
    return Gmm(np.array(weights), np.array(means), np.array(covs)), remap[labels]


def cluster(e: ParticleEnsemble, k: int, rng: np.random.Generator) -> Gmm:
    """k-means++ then Lloyd to a fixed point; Gaussians fit per cluster."""
    g, _ = cluster_assign(e, k, rng)
    return g


def choose_cluster_count(e: ParticleEnsemble, max_k: int,
                         rng: np.random.Generator,
                         min_reduction: float = 0.05) -> int:
    """Elbow rule: grow k while within-cluster variance drops >= 5% per step."""
    if e.n <= 1:
        return 1
    y = _whiten(e)
    max_k = min(max_k, e.n)
    prev = None
    chosen = 1
    for k in range(1, max_k + 1):
        if k == 1:
            wss = float(np.sum(e.weights[:, None] * y**2))
        else:
            centers = _kmeanspp_seed(y, e.weights, k, rng)
            labels = _lloyd(y, e.weights, centers)
            wss = 0.0
            for j in range(k):
                mask = labels == j
                if not np.any(mask):
                    continue
                c = (e.weights[mask] @ y[mask]) / e.weights[mask].sum()
                wss += float(np.sum(e.weights[mask, None] * (y[mask] - c) ** 2))
        if prev is not None:
            if prev <= 0.0 or (prev - wss) / prev < min_reduction:
                break
        chosen = k
        prev = wss
    return chosen


def entropy(e: ParticleEnsemble, g: Gmm) -> float:
    """Particle-based entropy -(1/N) sum log p(x_i), in nats.

    Exactly invariant under particle reordering (exactly rounded sum).
    """
    if e.frame != "synodic":
        raise FrameMismatchError(
            f"entropy expects synodic-frame particles, got {e.frame!r}"
        )
    ll = log_pdf(g, e.states)
    return -math.fsum(np.atleast_1d(ll)) / e.n


def mixture_moments(g: Gmm) -> tuple[np.ndarray, np.ndarray]:
    """Overall mean and covariance of the mixture."""
    mean = g.weights @ g.means
    dev = g.means - mean
    cov = np.einsum("k,kij->ij", g.weights, g.covs)
    cov = cov + (dev * g.weights[:, None]).T @ dev
    return mean, 0.5 * (cov + cov.T)


# --- uniform box ------------------------------------------------------------


def box_sample(b: UniformBox, n: int, rng: np.random.Generator,
               epoch: float = 0.0, lineage: str = "") -> ParticleEnsemble:
    if n < 1:
        raise ValueError("n must be >= 1")
    u = rng.random((n, b.dim))
    states = b.lower + u * b.widths
    return ParticleEnsemble.uniform(states, frame=b.frame, epoch=epoch,
                                    lineage=lineage)


def box_contains(b: UniformBox, x) -> bool | np.ndarray:
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    inside = np.all((pts >= b.lower) & (pts <= b.upper), axis=1)
    return bool(inside[0]) if np.asarray(x).ndim == 1 else inside


def box_log_density(b: UniformBox) -> float:
    return -float(np.sum(np.log(b.widths)))

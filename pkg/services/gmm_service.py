"""
GMM Service - Gaussian Mixture Prior
EM fitting over transition tuples and the likelihood-weighted (Phi, mu0)
used as the inverse-Wishart prior of each timestep.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from services.core_service import empirical_moments

logger = logging.getLogger(__name__)

COV_FLOOR = 1e-8
COLLAPSE_WEIGHT = 1e-8


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    log_likelihoods: tuple = field(default=())

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError('GMM weights must be non-negative and sum to 1')
        for arr in (self.weights, self.means, self.covs):
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _component_logpdf(X: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Log density of every row of X under N(mu, sigma)."""
    D = X.shape[1]
    L = scipy.linalg.cholesky(sigma, lower=True)
    # -0.5*log|sigma| = -sum(log(diag(L)))
    soln = scipy.linalg.solve_triangular(L, (X - mu).T, lower=True)
    return -0.5 * D * np.log(2 * np.pi) - np.sum(np.log(np.diag(L))) - 0.5 * np.sum(soln ** 2, axis=0)


def _estep(X, weights, means, covs) -> np.ndarray:
    """N x K array of log(weight_k * N(x_n | mu_k, sigma_k))."""
    logprobs = np.empty((X.shape[0], weights.shape[0]))
    for k in range(weights.shape[0]):
        with np.errstate(divide='ignore'):
            logprobs[:, k] = np.log(weights[k]) + _component_logpdf(X, means[k], covs[k])
    return logprobs


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(X.shape[0])]]
    for _ in range(1, K):
        d2 = np.min([np.sum((X - c) ** 2, axis=1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(X.shape[0])
        else:
            idx = rng.choice(X.shape[0], p=d2 / total)
        centers.append(X[idx])
    return np.array(centers)


def fit_em(data, K: int = 5, seed: int = 0, max_iters: int = 100, tol: float = 1e-6,
           floor: float = COV_FLOOR) -> GmmModel:
    """Fit a K-component mixture by EM with k-means++ seeding."""
    X = np.array([np.ravel(d) for d in data], dtype=np.float64)
    if K < 1:
        raise ValueError(f'K must be >= 1, got {K}')
    if X.shape[0] < K:
        raise ValueError(f'need at least K={K} data points, got {X.shape[0]}')
    N, D = X.shape
    rng = np.random.default_rng(seed)

    _, global_cov = empirical_moments(X)
    # scaled to the data spread, never below the absolute floor
    reg = floor * max(float(np.mean(np.diag(global_cov))), 1.0)
    eye = np.eye(D)

    means = _kmeans_pp(X, K, rng)
    covs = np.array([global_cov + reg * eye for _ in range(K)])
    weights = np.full(K, 1.0 / K)

    history = []
    prev_ll = -np.inf
    for itr in range(max_iters):
        logprobs = _estep(X, weights, means, covs)
        ll = float(np.sum(logsumexp(logprobs, axis=1)))
        history.append(ll)
        if itr > 0 and ll - prev_ll < tol * max(1.0, abs(ll)):
            break
        prev_ll = ll

        # M-step
        resp = np.exp(logprobs - logsumexp(logprobs, axis=1, keepdims=True))
        nk = resp.sum(axis=0)
        weights = nk / N
        for k in range(K):
            if weights[k] < COLLAPSE_WEIGHT:
                idx = int(rng.integers(N))
                logger.warning('GMM component %d collapsed at iteration %d; re-seeding from datum %d', k, itr, idx)
                means[k] = X[idx]
                covs[k] = global_cov + reg * eye
                weights[k] = 1.0 / K
                continue
            mu = resp[:, k] @ X / nk[k]
            diff = X - mu
            sigma = (resp[:, k, None] * diff).T @ diff / nk[k]
            means[k] = mu
            covs[k] = 0.5 * (sigma + sigma.T) + reg * eye
        weights = weights / weights.sum()

    logger.debug('GMM fit K=%d N=%d D=%d iterations=%d ll=%.6g', K, N, D, len(history), history[-1])
    return GmmModel(weights=weights, means=means, covs=covs, log_likelihoods=tuple(history))


def window_log_weights(model: GmmModel, window) -> np.ndarray:
    """Normalized log of p(window | mu_i, sigma_i), the joint likelihood of the window."""
    W = np.array([np.ravel(w) for w in window], dtype=np.float64)
    if W.ndim != 2 or W.shape[0] < 1:
        raise ValueError('gmm_prior needs a non-empty window')
    if W.shape[1] != model.dim:
        raise ValueError(f'window dimension {W.shape[1]} does not match model dimension {model.dim}')
    loglik = np.array([np.sum(_component_logpdf(W, model.means[k], model.covs[k])) for k in range(model.K)])
    loglik[~np.isfinite(loglik)] = -np.inf
    if not np.any(np.isfinite(loglik)):
        logger.warning('GMM window likelihoods underflowed; using uniform component weights')
        return np.full(model.K, -np.log(model.K))
    return loglik - logsumexp(loglik)


def gmm_prior(model: GmmModel, window) -> tuple[np.ndarray, np.ndarray]:
    """Likelihood-weighted average of the component moments: (Phi, mu0)."""
    w = np.exp(window_log_weights(model, window))
    w = w / w.sum()
    mu0 = w @ model.means
    phi = np.tensordot(w, model.covs, axes=1)
    return 0.5 * (phi + phi.T), mu0

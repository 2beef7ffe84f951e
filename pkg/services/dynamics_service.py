"""
Dynamics Service - Time-Varying Locally Linear Dynamics
Per-timestep joint Gaussians over delay-augmented <x, u, x'> tuples, smoothed
with an inverse-Wishart prior whose (Phi, mu0) come from a GMM.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from services.core_service import (
    JointGaussian, Trajectory, condition_gaussian, conditional_gain, empirical_moments,
)
from services.delay_service import HistoryLayout, transition_tuples
from services.gmm_service import fit_em, gmm_prior

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IwPrior:
    Phi: np.ndarray
    mu0: np.ndarray
    m: float = 1.0
    n0: float = 1.0

    def __post_init__(self):
        if not (self.m > 0 and self.n0 > 0):
            raise ValueError('inverse-Wishart prior needs m > 0 and n0 > 0')
        Phi = np.asarray(self.Phi, dtype=np.float64)
        if np.max(np.abs(Phi - Phi.T), initial=0.0) > 1e-12 * max(float(np.max(np.abs(Phi), initial=0.0)), 1e-300):
            raise ValueError('prior Phi is not symmetric')


@dataclass(frozen=True)
class PriorSettings:
    """Knobs of the dynamics prior; mirrors the [gmm] config section."""
    prior: str = 'gmm'
    K: int = 5
    max_iters: int = 100
    tol: float = 1e-6
    floor: float = 1e-8
    seed: int = 0
    pool_trajectories: bool = False


@dataclass(frozen=True)
class DynamicsModel:
    per_timestep: tuple
    layout: HistoryLayout
    M: int
    priors: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if not self.per_timestep:
            raise ValueError('dynamics model needs at least one timestep')
        expected = (self.layout.aug_dim, self.layout.control_dim, self.layout.state_dim)
        for g in self.per_timestep:
            if tuple(g.block_dims) != expected:
                raise ValueError(f'timestep Gaussian blocks {g.block_dims} != {expected}')

    @property
    def horizon(self) -> int:
        return len(self.per_timestep)

    @property
    def aug_dims(self) -> tuple[int, int, int]:
        return self.per_timestep[0].block_dims

    def _check_t(self, t: int) -> None:
        if not 0 <= t < self.horizon:
            raise ValueError(f'timestep {t} out of range [0, {self.horizon})')

    @cached_property
    def _affine(self) -> tuple:
        out = []
        for g in self.per_timestep:
            F = conditional_gain(g)
            k = g.input_dim
            f0 = g.mean[k:] - F @ g.mean[:k]
            F.setflags(write=False)
            f0.setflags(write=False)
            out.append((F, f0))
        return tuple(out)

    def linearize(self, t: int):
        self._check_t(t)
        return self._affine[t]

    def predict(self, t: int, x_aug, u) -> np.ndarray:
        self._check_t(t)
        u = u.as_array() if hasattr(u, 'as_array') else np.ravel(u)
        return condition_gaussian(self.per_timestep[t], np.concatenate([np.ravel(x_aug), u]))


def posterior_moments(mu_hat, sigma_hat, M: int, prior: IwPrior, n: Optional[float] = None):
    """Inverse-Wishart posterior mean/covariance of one timestep (n defaults to n0)."""
    n = prior.n0 if n is None else n
    m = prior.m
    diff = mu_hat - prior.mu0
    mu = (m * prior.mu0 + M * mu_hat) / (m + M)
    sigma = (prior.Phi + M * sigma_hat + (M * m / (n + m)) * np.outer(diff, diff)) / (M + prior.n0)
    return mu, 0.5 * (sigma + sigma.T)


def global_prior(data: np.ndarray, n0: float = 1.0) -> IwPrior:
    mu_bar, sigma_bar = empirical_moments(data)
    return IwPrior(Phi=n0 * sigma_bar, mu0=mu_bar, m=1.0, n0=n0)


def fit_dynamics_from_tuples(tuples: np.ndarray, layout: HistoryLayout, settings: PriorSettings = PriorSettings(),
                             gmm_data: Optional[np.ndarray] = None) -> DynamicsModel:
    """Fit from an (M, T, D) array of augmented tuples.

    ``gmm_data`` replaces the pooled tuples the mixture is fit on (used when
    trajectories share one mixture).
    """
    tuples = np.asarray(tuples, dtype=np.float64)
    if tuples.ndim != 3:
        raise ValueError(f'tuples must be (M, T, D), got shape {tuples.shape}')
    M, T, D = tuples.shape
    if M < 1:
        raise ValueError('fit_dynamics needs at least one rollout')
    expected = layout.aug_dim + layout.control_dim + layout.state_dim
    if D != expected:
        raise ValueError(f'tuple dimension {D} != {expected} for history n={layout.n}')

    pooled = tuples.reshape(M * T, D)
    fallback = global_prior(pooled)
    model = None
    if settings.prior == 'gmm':
        try:
            model = fit_em(pooled if gmm_data is None else gmm_data, K=settings.K, seed=settings.seed,
                           max_iters=settings.max_iters, tol=settings.tol, floor=settings.floor)
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.warning('GMM prior fit failed (%s); using the global empirical prior', exc)
            model = None
    elif settings.prior != 'global':
        raise ValueError(f"unknown prior mode '{settings.prior}'")

    block_dims = (layout.aug_dim, layout.control_dim, layout.state_dim)
    gaussians, priors = [], []
    for t in range(T):
        window = tuples[:, t, :]
        mu_hat, sigma_hat = empirical_moments(window)
        prior = fallback
        if model is not None:
            try:
                Phi, mu0 = gmm_prior(model, window)
                prior = IwPrior(Phi=Phi, mu0=mu0)
            except (ValueError, np.linalg.LinAlgError) as exc:
                logger.warning('GMM prior failed at t=%d (%s); using the global empirical prior', t, exc)
        mu, sigma = posterior_moments(mu_hat, sigma_hat, M, prior)
        gaussians.append(JointGaussian(mu, sigma, block_dims))
        priors.append(prior)
    return DynamicsModel(per_timestep=tuple(gaussians), layout=layout, M=M, priors=tuple(priors))


def fit_dynamics(rollouts: Sequence[Trajectory], layout: HistoryLayout, settings: PriorSettings = PriorSettings(),
                 gmm_data: Optional[np.ndarray] = None) -> DynamicsModel:
    """Fit one trajectory's model from its M raw rollouts."""
    if not rollouts:
        raise ValueError('fit_dynamics needs at least one rollout')
    horizon = rollouts[0].horizon
    for traj in rollouts:
        if traj.horizon != horizon:
            raise ValueError(f'mismatched horizons: {traj.horizon} vs {horizon}')
    return fit_dynamics_from_tuples(transition_tuples(rollouts, layout), layout, settings, gmm_data=gmm_data)


def predict(model, t: int, x_aug, u) -> np.ndarray:
    return model.predict(t, x_aug, u)


def linearize(model, t: int):
    """(F, f0) with predict(model, t, x, u) == F @ [x, u] + f0."""
    return model.linearize(t)


def simulate(model, z0, controls) -> Trajectory:
    """Roll fixed controls through the learned model from z0."""
    layout = model.layout
    controls = np.asarray(controls, dtype=np.float64).reshape(-1, layout.control_dim)
    zs = [np.asarray(z0, dtype=np.float64).ravel()]
    for t in range(controls.shape[0]):
        F, f0 = model.linearize(t)
        x_next = F @ np.concatenate([zs[-1], controls[t]]) + f0
        zs.append(layout.shift(zs[-1], controls[t], x_next))
    return Trajectory(np.array(zs), controls)

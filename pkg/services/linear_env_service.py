"""
Linear Test Environment - x' = A x + B u + noise
Substrate for the LQR/Riccati oracles and the trajectory optimizer tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from services.core_service import JointGaussian, Trajectory
from services.delay_service import HistoryLayout


@dataclass(frozen=True)
class LinearDynamics:
    """Exact time-invariant linear model exposing the DynamicsModel interface."""
    A: np.ndarray
    B: np.ndarray
    horizon: int
    c: Optional[np.ndarray] = None
    layout: HistoryLayout = field(init=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError(f'inconsistent dimensions A{A.shape} B{B.shape}')
        c = np.zeros(A.shape[0]) if self.c is None else np.asarray(self.c, dtype=np.float64).ravel()
        object.__setattr__(self, 'A', A)
        object.__setattr__(self, 'B', B)
        object.__setattr__(self, 'c', c)
        object.__setattr__(self, 'layout', HistoryLayout(n=1, state_dim=A.shape[0], control_dim=B.shape[1]))

    def linearize(self, t: int):
        if not 0 <= t < self.horizon:
            raise ValueError(f'timestep {t} out of range [0, {self.horizon})')
        return np.hstack([self.A, self.B]), self.c

    def predict(self, t: int, x_aug, u) -> np.ndarray:
        F, f0 = self.linearize(t)
        return F @ np.concatenate([np.ravel(x_aug), np.ravel(u)]) + f0

    def joint_gaussian(self, input_cov: np.ndarray, input_mean: Optional[np.ndarray] = None) -> JointGaussian:
        """Noiseless joint over <x, u, x'> implied by an input distribution."""
        dx, du = self.B.shape
        input_mean = np.zeros(dx + du) if input_mean is None else np.asarray(input_mean, dtype=np.float64)
        F = np.hstack([self.A, self.B])
        mean = np.concatenate([input_mean, F @ input_mean + self.c])
        cov = np.block([[input_cov, input_cov @ F.T], [F @ input_cov, F @ input_cov @ F.T]])
        return JointGaussian(mean, 0.5 * (cov + cov.T), (dx, du, dx))


class LinearTestEnv:
    """Stepping environment around LinearDynamics with optional Gaussian process noise."""

    def __init__(self, A, B, noise_scale: float = 0.0, horizon: int = 30):
        self.model = LinearDynamics(A, B, horizon)
        self.noise_scale = float(noise_scale)
        self.horizon = int(horizon)
        self.x = np.zeros(self.model.A.shape[0])
        self._rng = np.random.default_rng(0)

    @property
    def state_dim(self) -> int:
        return self.model.A.shape[0]

    @property
    def control_dim(self) -> int:
        return self.model.B.shape[1]

    def reset(self, x0, seed: int = 0) -> np.ndarray:
        self.x = np.asarray(x0, dtype=np.float64).ravel().copy()
        self._rng = np.random.default_rng(seed)
        return self.x.copy()

    def step(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64).ravel()
        self.x = self.model.A @ self.x + self.model.B @ u
        if self.noise_scale > 0:
            self.x = self.x + self.noise_scale * self._rng.standard_normal(self.x.shape)
        return self.x.copy()

    def as_model(self) -> LinearDynamics:
        return self.model

    def rollout(self, x0, controls, seed: int = 0) -> Trajectory:
        states = [self.reset(x0, seed=seed)]
        for u in np.asarray(controls, dtype=np.float64).reshape(self.horizon, -1):
            states.append(self.step(u))
        return Trajectory(np.array(states), np.asarray(controls, dtype=np.float64).reshape(self.horizon, -1))


def random_system(rng: np.random.Generator, state_dim: int, control_dim: int = 1, horizon: int = 30) -> LinearTestEnv:
    """A random, mildly stable system for oracle comparisons."""
    A = rng.standard_normal((state_dim, state_dim))
    A = 0.95 * A / max(1.0, float(np.max(np.abs(np.linalg.eigvals(A)))))
    B = rng.standard_normal((state_dim, control_dim))
    return LinearTestEnv(A, B, horizon=horizon)

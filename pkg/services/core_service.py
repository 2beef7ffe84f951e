"""
Core Service - Domain Vectors and Gaussian Algebra
State/control/trajectory types, empirical moments and Gaussian conditioning
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from services.errors import DegenerateMarginalError, NoSamplesError

STATE_DIM = 4
CONTROL_DIM = 1

# Ridge added to the conditioning marginal, relative to its mean diagonal.
CONDITION_RIDGE = 1e-6


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class StateVec:
    """Pouring state: cup angle, grams left to pour, its change, grams in cup."""
    angle: float
    remaining: float
    d_remaining: float
    in_cup: float

    def __post_init__(self):
        for name in ('angle', 'remaining', 'd_remaining', 'in_cup'):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f'StateVec.{name} must be finite')

    def as_array(self) -> np.ndarray:
        return np.array([self.angle, self.remaining, self.d_remaining, self.in_cup], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> 'StateVec':
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.shape != (STATE_DIM,):
            raise ValueError(f'StateVec needs {STATE_DIM} components, got {values.shape[0]}')
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class ControlVec:
    """Wrist angular velocity in rad/s."""
    wrist_velocity: float

    def __post_init__(self):
        if not math.isfinite(self.wrist_velocity):
            raise ValueError('ControlVec.wrist_velocity must be finite')

    def as_array(self) -> np.ndarray:
        return np.array([self.wrist_velocity], dtype=np.float64)

    def within(self, limit: float) -> bool:
        return abs(self.wrist_velocity) <= limit

    @classmethod
    def clamped(cls, value, limit: float) -> 'ControlVec':
        value = float(np.asarray(value, dtype=np.float64).ravel()[0])
        return cls(min(max(value, -limit), limit))


@dataclass(frozen=True)
class Trajectory:
    """States (T+1 rows) and controls (T rows) of one episode.

    Raw pouring trajectories carry 4-dim states; trajectories built for the
    optimizer carry the stacked history state instead.
    """
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        states = _frozen(np.atleast_2d(self.states))
        controls = np.array(self.controls, dtype=np.float64)
        if controls.ndim == 1:
            controls = controls.reshape(-1, CONTROL_DIM)
        controls.setflags(write=False)
        if states.shape[0] != controls.shape[0] + 1:
            raise ValueError(
                f'trajectory needs len(states) == len(controls) + 1, got {states.shape[0]} and {controls.shape[0]}'
            )
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(controls))):
            raise ValueError('trajectory contains non-finite values')
        object.__setattr__(self, 'states', states)
        object.__setattr__(self, 'controls', controls)

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def control_dim(self) -> int:
        return self.controls.shape[1]

    def state(self, t: int) -> StateVec:
        return StateVec.from_array(self.states[t])

    def control(self, t: int) -> ControlVec:
        return ControlVec(float(self.controls[t, 0]))

    def check_horizon(self, horizon: int) -> None:
        if self.horizon != horizon:
            raise ValueError(f'trajectory horizon {self.horizon} does not match configured T={horizon}')


@dataclass(frozen=True)
class JointGaussian:
    """Gaussian over the concatenation <x, u, x'> with named block sizes."""
    mean: np.ndarray
    cov: np.ndarray
    block_dims: tuple[int, int, int] = field(default=(0, 0, 0))

    def __post_init__(self):
        mean = _frozen(np.ravel(self.mean))
        cov = np.array(self.cov, dtype=np.float64)
        dims = tuple(int(d) for d in self.block_dims)
        if len(dims) != 3 or min(dims) < 0:
            raise ValueError(f'block_dims must be three non-negative sizes, got {self.block_dims}')
        total = sum(dims)
        if mean.shape != (total,):
            raise ValueError(f'mean length {mean.shape[0]} != {total} from block_dims {dims}')
        if cov.shape != (total, total):
            raise ValueError(f'cov shape {cov.shape} != ({total}, {total})')
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError('JointGaussian contains non-finite values')
        scale = max(float(np.max(np.abs(cov))), np.finfo(float).tiny)
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise ValueError('JointGaussian cov is not symmetric')
        cov = 0.5 * (cov + cov.T)
        trace = float(np.trace(cov))
        if total and float(np.linalg.eigvalsh(cov)[0]) < -1e-10 * max(trace, 0.0):
            raise ValueError('JointGaussian cov is not positive semi-definite')
        cov.setflags(write=False)
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'cov', cov)
        object.__setattr__(self, 'block_dims', dims)

    @property
    def input_dim(self) -> int:
        return self.block_dims[0] + self.block_dims[1]

    @property
    def output_dim(self) -> int:
        return self.block_dims[2]


def empirical_moments(samples: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population (1/M) covariance of a list of equal-length vectors."""
    if samples is None or len(samples) == 0:
        raise NoSamplesError()
    lengths = {np.size(s) for s in samples}
    if len(lengths) != 1:
        raise ValueError(f'samples have mismatched dimensions: {sorted(lengths)}')
    X = np.array([np.ravel(s) for s in samples], dtype=np.float64)
    mean = X.mean(axis=0)
    # constant coordinates get an exact mean so their variance is exactly zero
    constant = np.all(X == X[0], axis=0)
    mean[constant] = X[0, constant]
    centered = X - mean
    cov = centered.T @ centered / X.shape[0]
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def _factor_marginal(g: JointGaussian):
    k = g.input_dim
    S_aa = np.array(g.cov[:k, :k])
    ridge = CONDITION_RIDGE * float(np.mean(np.diag(S_aa))) if k else 0.0
    if k and not ridge > 0.0:
        raise DegenerateMarginalError()
    S_aa[np.diag_indices_from(S_aa)] += ridge
    try:
        return scipy.linalg.cho_factor(S_aa, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise DegenerateMarginalError() from exc


def conditional_gain(g: JointGaussian) -> np.ndarray:
    """Sigma_{x'<x,u>} Sigma_{<x,u><x,u>}^{-1} for the regularized marginal."""
    k = g.input_dim
    factor = _factor_marginal(g)
    S_ba = g.cov[k:, :k]
    return scipy.linalg.cho_solve(factor, S_ba.T, check_finite=False).T


def condition_gaussian(g: JointGaussian, xu) -> np.ndarray:
    """Conditional mean of x' given <x, u>."""
    xu = np.asarray(xu, dtype=np.float64).ravel()
    k = g.input_dim
    if xu.shape != (k,):
        raise ValueError(f'conditioning vector has length {xu.shape[0]}, expected {k}')
    factor = _factor_marginal(g)
    solved = scipy.linalg.cho_solve(factor, xu - g.mean[:k], check_finite=False)
    return g.mean[k:] + g.cov[k:, :k] @ solved

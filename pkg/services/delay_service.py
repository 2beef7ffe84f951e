"""
Delay Service - State-History Augmentation
Stacks the last n states (and the controls between them) so delayed sensor
effects become predictable from the augmented state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from services.core_service import CONTROL_DIM, STATE_DIM, Trajectory


@dataclass(frozen=True)
class HistoryLayout:
    """Index layout of the stacked history shared by dynamics, policy and trajopt.

    z = [x_{t-n+1}, u_{t-n+1}, ..., x_{t-1}, u_{t-1}, x_t]
    """
    n: int
    state_dim: int = STATE_DIM
    control_dim: int = CONTROL_DIM

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f'history length n must be >= 1, got {self.n}')

    @property
    def aug_dim(self) -> int:
        return self.n * self.state_dim + (self.n - 1) * self.control_dim

    @property
    def dynamics_input_dim(self) -> int:
        return self.n * (self.state_dim + self.control_dim)

    @property
    def policy_dim(self) -> int:
        return self.n * self.state_dim

    @property
    def current_state_slice(self) -> slice:
        return slice(self.aug_dim - self.state_dim, self.aug_dim)

    def state_indices(self) -> np.ndarray:
        stride = self.state_dim + self.control_dim
        return np.concatenate([
            np.arange(k * stride, k * stride + self.state_dim) for k in range(self.n)
        ])

    def policy_selector(self) -> np.ndarray:
        """Matrix S with augment_for_policy == S @ z."""
        S = np.zeros((self.policy_dim, self.aug_dim))
        S[np.arange(self.policy_dim), self.state_indices()] = 1.0
        return S

    def policy_input(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)[..., self.state_indices()]

    def transition(self, F: np.ndarray, f0: np.ndarray):
        """Assemble z' = A z + B u + c from the next-state map x' = F [z, u] + f0."""
        dz, du, d = self.aug_dim, self.control_dim, self.state_dim
        A = np.zeros((dz, dz))
        B = np.zeros((dz, du))
        c = np.zeros(dz)
        if self.n > 1:
            keep = dz - d - du
            A[:keep, d + du:] = np.eye(keep)
            B[keep:keep + du, :] = np.eye(du)
        A[dz - d:, :] = F[:, :dz]
        B[dz - d:, :] = F[:, dz:]
        c[dz - d:] = f0
        return A, B, c

    def shift(self, z, u, x_next) -> np.ndarray:
        """Exact next augmented state given the predicted or observed x'."""
        z = np.asarray(z, dtype=np.float64)
        parts = []
        if self.n > 1:
            parts.append(z[self.state_dim + self.control_dim:])
            parts.append(np.ravel(u))
        parts.append(np.ravel(x_next))
        return np.concatenate(parts)


@dataclass(frozen=True)
class HistoryBuffer:
    """The last n states, oldest first, and the n-1 controls applied between them."""
    layout: HistoryLayout
    states: tuple
    controls: tuple

    def __post_init__(self):
        if len(self.states) != self.layout.n or len(self.controls) != self.layout.n - 1:
            raise ValueError(
                f'history buffer needs {self.layout.n} states and {self.layout.n - 1} controls'
            )

    @classmethod
    def start(cls, layout: HistoryLayout, x0) -> 'HistoryBuffer':
        """Episode-start padding: x0 replicated into every slot, zero controls."""
        x0 = np.asarray(x0, dtype=np.float64).ravel()
        zero_u = np.zeros(layout.control_dim)
        return cls(layout, tuple(x0.copy() for _ in range(layout.n)),
                   tuple(zero_u.copy() for _ in range(layout.n - 1)))

    @property
    def current(self) -> np.ndarray:
        return self.states[-1]

    def stacked(self) -> np.ndarray:
        """The augmented state z."""
        parts = []
        for k in range(self.layout.n - 1):
            parts.append(self.states[k])
            parts.append(self.controls[k])
        parts.append(self.states[-1])
        return np.concatenate(parts)


def _as_vector(value) -> np.ndarray:
    if hasattr(value, 'as_array'):
        return value.as_array()
    return np.asarray(value, dtype=np.float64).ravel()


def push(buf: HistoryBuffer, x, u_prev) -> HistoryBuffer:
    """Drop the oldest entry and append x with the control that produced it."""
    x = _as_vector(x)
    u_prev = _as_vector(u_prev)
    states = buf.states[1:] + (x,)
    controls = (buf.controls[1:] + (u_prev,)) if buf.layout.n > 1 else ()
    return HistoryBuffer(buf.layout, states, controls)


def augment_for_dynamics(buf: HistoryBuffer, u_now) -> np.ndarray:
    return np.concatenate([buf.stacked(), _as_vector(u_now)])


def augment_for_policy(buf: HistoryBuffer) -> np.ndarray:
    return np.concatenate(buf.states)


def augmented_trajectory(traj: Trajectory, layout: HistoryLayout) -> Trajectory:
    """Replay a raw trajectory through a history buffer; states become z_t."""
    buf = HistoryBuffer.start(layout, traj.states[0])
    zs = [buf.stacked()]
    for t in range(traj.horizon):
        buf = push(buf, traj.states[t + 1], traj.controls[t])
        zs.append(buf.stacked())
    return Trajectory(np.array(zs), traj.controls)


def transition_tuples(rollouts: Sequence[Trajectory], layout: HistoryLayout) -> np.ndarray:
    """Array (M, T, dz + du + d) of delay-augmented <x, u, x'> tuples."""
    if not rollouts:
        raise ValueError('no rollouts to build tuples from')
    horizon = rollouts[0].horizon
    out = []
    for traj in rollouts:
        traj.check_horizon(horizon)
        z = augmented_trajectory(traj, layout).states
        out.append(np.hstack([z[:-1], traj.controls, traj.states[1:]]))
    return np.array(out)

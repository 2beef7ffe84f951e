"""
Trajectory Optimization Service - iLQG on Learned Time-Varying Linear Dynamics
Backward pass against the policy-deviation cost l*(x, u) = l(x, u) + lam*||u - pi(x)||^2
and a backtracking forward pass through the learned model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg

from services.core_service import Trajectory
from services.errors import BackwardPassDivergedError
from services.policy_service import PolicyNet, policy_forward, policy_jacobian

logger = logging.getLogger(__name__)

# Levenberg schedule for Q_uu
MU_INIT = 1e-6
MU_MIN = 1e-6
MU_FACTOR = 10.0
MU_DECREASE = 2.0
MU_MAX = 1e10

ALPHAS = tuple(0.5 ** k for k in range(11))


@dataclass(frozen=True)
class CostModel:
    """Quadratic task cost on the stacked state z and control u.

    l(z, u) = 0.5 (z - z_ref)' Q (z - z_ref) + 0.5 u' R u
    l_T(z)  = 0.5 (z - z_ref)' Qf (z - z_ref)
    """
    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    z_ref: Optional[np.ndarray] = None
    lam: float = 0.0
    policy_input: Optional[np.ndarray] = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        Qf = np.atleast_2d(np.asarray(self.Qf, dtype=np.float64))
        for name, M in (('Q', Q), ('R', R), ('Qf', Qf)):
            if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, float(np.max(np.abs(M))))):
                raise ValueError(f'cost Hessian {name} is not symmetric')
        if self.lam < 0:
            raise ValueError('policy-deviation weight lam must be >= 0')
        z_ref = np.zeros(Q.shape[0]) if self.z_ref is None else np.asarray(self.z_ref, dtype=np.float64).ravel()
        S = np.eye(Q.shape[0]) if self.policy_input is None else np.asarray(self.policy_input, dtype=np.float64)
        object.__setattr__(self, 'Q', Q)
        object.__setattr__(self, 'R', R)
        object.__setattr__(self, 'Qf', Qf)
        object.__setattr__(self, 'z_ref', z_ref)
        object.__setattr__(self, 'policy_input', S)

    @classmethod
    def pouring(cls, layout, w_u: float = 1e-3, w_r: float = 1e-2, w_T: float = 10.0, lam: float = 0.1) -> 'CostModel':
        """w_u u^2 + w_r remaining^2 running, w_T remaining^2 terminal, on the current state."""
        dz = layout.aug_dim
        remaining = layout.current_state_slice.start + 1
        Q = np.zeros((dz, dz))
        Qf = np.zeros((dz, dz))
        Q[remaining, remaining] = 2.0 * w_r
        Qf[remaining, remaining] = 2.0 * w_T
        R = 2.0 * w_u * np.eye(layout.control_dim)
        return cls(Q, R, Qf, lam=lam, policy_input=layout.policy_selector())

    def with_lam(self, lam: float) -> 'CostModel':
        return replace(self, lam=lam)

    def task_cost(self, z, u) -> float:
        dz = np.ravel(z) - self.z_ref
        u = np.ravel(u)
        return float(0.5 * dz @ self.Q @ dz + 0.5 * u @ self.R @ u)

    def terminal_cost(self, z) -> float:
        dz = np.ravel(z) - self.z_ref
        return float(0.5 * dz @ self.Qf @ dz)

    def expand(self, z, u):
        """(l_z, l_u, l_zz, l_uu, l_uz) of the task cost at (z, u)."""
        dz = np.ravel(z) - self.z_ref
        u = np.ravel(u)
        return self.Q @ dz, self.R @ u, self.Q, self.R, np.zeros((self.R.shape[0], self.Q.shape[0]))


@dataclass(frozen=True)
class BackwardPassResult:
    open_loop: Trajectory
    gains: np.ndarray
    feedforward: np.ndarray
    value_gradients: np.ndarray
    value_hessians: np.ndarray
    expected_improvement: float
    mu: float = MU_INIT

    def __post_init__(self):
        T, du = self.open_loop.controls.shape
        dz = self.open_loop.states.shape[1]
        if np.shape(self.gains) != (T, du, dz):
            raise ValueError(f'gains must be (T, du, dz) = {(T, du, dz)}, got {np.shape(self.gains)}')

    def with_open_loop(self, trajectory: Trajectory) -> 'BackwardPassResult':
        return replace(self, open_loop=trajectory)


@dataclass(frozen=True)
class ForwardPassResult:
    trajectory: Trajectory
    alpha: float
    cost_before: float
    cost_after: float
    improved: bool


def _policy_input(cost: CostModel, z) -> np.ndarray:
    return cost.policy_input @ np.ravel(z)


def modified_cost(cost: CostModel, policy: Optional[PolicyNet], x_aug, u, lam: Optional[float] = None) -> float:
    """l(x, u) + lam * ||u - pi(x)||^2; the penalty is skipped while no policy exists."""
    lam = cost.lam if lam is None else lam
    value = cost.task_cost(x_aug, u)
    if policy is not None and lam:
        dev = np.ravel(u) - policy_forward(policy, _policy_input(cost, x_aug))
        value += lam * float(dev @ dev)
    return value


def trajectory_cost(cost: CostModel, policy: Optional[PolicyNet], traj: Trajectory) -> float:
    total = sum(modified_cost(cost, policy, traj.states[t], traj.controls[t]) for t in range(traj.horizon))
    return total + cost.terminal_cost(traj.states[-1])


def _expand_modified(cost: CostModel, policy: Optional[PolicyNet], z, u):
    l_z, l_u, l_zz, l_uu, l_uz = cost.expand(z, u)
    if policy is None or not cost.lam:
        return l_z, l_u, l_zz, l_uu, l_uz
    # pi linearized at z: u - pi(z + dz) ~ r + du - P dz
    lam = cost.lam
    S = cost.policy_input
    P = policy_jacobian(policy, S @ np.ravel(z)) @ S
    r = np.ravel(u) - policy_forward(policy, S @ np.ravel(z))
    eye = np.eye(r.shape[0])
    return (l_z - 2 * lam * P.T @ r, l_u + 2 * lam * r, l_zz + 2 * lam * P.T @ P,
            l_uu + 2 * lam * eye, l_uz - 2 * lam * P)


def _transition(model, t: int):
    F, f0 = model.linearize(t)
    return model.layout.transition(F, f0)


def backward_pass(model, nominal: Trajectory, cost: CostModel, policy: Optional[PolicyNet] = None,
                  mu: float = MU_INIT) -> BackwardPassResult:
    """Riccati-style recursion from t = T-1 down to 0 around the nominal trajectory.

    Q_uu is regularized by mu*I; on a factorization failure mu grows by 10x and
    the pass restarts, up to MU_MAX.
    """
    T = nominal.horizon
    if T != model.horizon:
        raise ValueError(f'nominal horizon {T} does not match model horizon {model.horizon}')
    dz, du = nominal.state_dim, nominal.control_dim
    if dz != model.layout.aug_dim or du != model.layout.control_dim:
        raise ValueError('nominal trajectory dimensions do not match the dynamics model')

    transitions = [_transition(model, t) for t in range(T)]
    expansions = [_expand_modified(cost, policy, nominal.states[t], nominal.controls[t]) for t in range(T)]

    while True:
        result = _backward_recursion(nominal, cost, transitions, expansions, mu)
        if result is not None:
            return result
        mu = max(mu * MU_FACTOR, MU_MIN)
        logger.debug('Q_uu not positive definite; increasing Levenberg mu to %g', mu)
        if mu > MU_MAX:
            raise BackwardPassDivergedError()


def _backward_recursion(nominal, cost, transitions, expansions, mu):
    T = nominal.horizon
    dz, du = nominal.state_dim, nominal.control_dim
    gains = np.zeros((T, du, dz))
    ff = np.zeros((T, du))
    Vx_all = np.zeros((T + 1, dz))
    Vxx_all = np.zeros((T + 1, dz, dz))

    zT = nominal.states[-1]
    Vx = cost.Qf @ (zT - cost.z_ref)
    Vxx = cost.Qf.copy()
    Vx_all[T], Vxx_all[T] = Vx, Vxx
    improvement = 0.0
    eye = np.eye(du)

    for t in range(T - 1, -1, -1):
        A, B, c = transitions[t]
        l_z, l_u, l_zz, l_uu, l_uz = expansions[t]
        # defect of the nominal under the model (zero for consistent nominals)
        defect = A @ nominal.states[t] + B @ nominal.controls[t] + c - nominal.states[t + 1]
        Vx_next = Vx + Vxx @ defect

        Q_z = l_z + A.T @ Vx_next
        Q_u = l_u + B.T @ Vx_next
        Q_zz = l_zz + A.T @ Vxx @ A
        Q_uu = l_uu + B.T @ Vxx @ B
        Q_uz = l_uz + B.T @ Vxx @ A
        Q_uu = 0.5 * (Q_uu + Q_uu.T)

        try:
            factor = scipy.linalg.cho_factor(Q_uu + mu * eye, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(factor[0])):
            return None
        k = -scipy.linalg.cho_solve(factor, Q_u, check_finite=False)
        L = -scipy.linalg.cho_solve(factor, Q_uz, check_finite=False)

        Vx = Q_z + L.T @ Q_uu @ k + L.T @ Q_u + Q_uz.T @ k
        Vxx = Q_zz + L.T @ Q_uu @ L + L.T @ Q_uz + Q_uz.T @ L
        Vxx = 0.5 * (Vxx + Vxx.T)
        improvement += float(k @ Q_u + 0.5 * k @ Q_uu @ k)

        gains[t], ff[t] = L, k
        Vx_all[t], Vxx_all[t] = Vx, Vxx

    return BackwardPassResult(open_loop=nominal, gains=gains, feedforward=ff, value_gradients=Vx_all,
                              value_hessians=Vxx_all, expected_improvement=improvement,
                              mu=mu / MU_DECREASE if mu > MU_MIN else mu)


def rollout_gains(model, result: BackwardPassResult, alpha: float, z0=None, limit: Optional[float] = None
                  ) -> Trajectory:
    """u_t = u_hat_t + alpha k_t + L_t (z_t - z_hat_t) rolled through the model.

    With ``limit`` every control is clipped to [-limit, limit] before it is applied.
    """
    nominal = result.open_loop
    layout = model.layout
    z = np.array(nominal.states[0] if z0 is None else z0, dtype=np.float64)
    zs, us = [z], []
    for t in range(nominal.horizon):
        u = nominal.controls[t] + alpha * result.feedforward[t] + result.gains[t] @ (z - nominal.states[t])
        if limit is not None:
            u = np.clip(u, -limit, limit)
        F, f0 = model.linearize(t)
        x_next = F @ np.concatenate([z, u]) + f0
        z = layout.shift(z, u, x_next)
        zs.append(z)
        us.append(u)
    return Trajectory(np.array(zs), np.array(us))


def forward_pass(model, result: BackwardPassResult, cost: CostModel, policy: Optional[PolicyNet] = None,
                 alphas=ALPHAS, limit: Optional[float] = None) -> ForwardPassResult:
    """Backtracking line search over alpha; keeps the nominal when nothing helps."""
    nominal = result.open_loop
    before = trajectory_cost(cost, policy, nominal)
    for alpha in alphas:
        candidate = rollout_gains(model, result, alpha, limit=limit)
        after = trajectory_cost(cost, policy, candidate)
        if np.isfinite(after) and after <= before:
            return ForwardPassResult(candidate, alpha, before, after, True)
    logger.info('Forward pass found no improvement (cost %.6g); keeping the nominal', before)
    return ForwardPassResult(nominal, 0.0, before, before, False)

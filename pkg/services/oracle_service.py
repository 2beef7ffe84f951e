"""
Oracle Service - Analytic Self-Checks
Independent reference computations (Riccati recursion, Monte-Carlo regression,
finite differences, direct posterior formulas) compared against the library.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from services.core_service import JointGaussian, condition_gaussian
from services.delay_service import HistoryLayout
from services.dynamics_service import PriorSettings, fit_dynamics_from_tuples
from services.gmm_service import fit_em
from services.linear_env_service import random_system
from services.policy_service import PolicyNet, mse_and_gradients, policy_forward, policy_jacobian
from services.trajopt_service import CostModel, backward_pass, forward_pass

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float

    def line(self) -> str:
        status = 'PASS' if self.passed else 'FAIL'
        return f'{status}  {self.name:<14} max error {self.max_error:.3e} (tolerance {self.tolerance:.0e})'


def riccati_recursion(A, B, Q, R, Qf, horizon: int):
    """Finite-horizon discrete LQR: feedback gains K_t and cost-to-go Hessians P_t."""
    P = Qf.copy()
    gains = [None] * horizon
    hessians = [None] * (horizon + 1)
    hessians[horizon] = P
    for t in range(horizon - 1, -1, -1):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ A + A.T @ P @ B @ K
        P = 0.5 * (P + P.T)
        gains[t] = K
        hessians[t] = P
    return np.array(gains), np.array(hessians)


def _random_spd(rng, dim: int, floor: float) -> np.ndarray:
    M = rng.standard_normal((dim, dim))
    return M @ M.T / dim + floor * np.eye(dim)


def check_lqr(seed: int = 0, systems: int = 20, horizon: int = 30, tol: float = 1e-6) -> OracleResult:
    """backward_pass gains and optimal cost against the Riccati recursion."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(systems):
        dx = int(rng.integers(2, 7))
        du = int(rng.integers(1, 3))
        env = random_system(rng, dx, du, horizon)
        model = env.as_model()
        Q, R, Qf = _random_spd(rng, dx, 0.1), _random_spd(rng, du, 0.5), _random_spd(rng, dx, 0.1)
        x0 = rng.standard_normal(dx)
        nominal = env.rollout(x0, np.zeros((horizon, du)))
        cost = CostModel(Q, R, Qf)
        result = backward_pass(model, nominal, cost, mu=0.0)
        fwd = forward_pass(model, result, cost)

        gains, hessians = riccati_recursion(model.A, model.B, Q, R, Qf, horizon)
        optimum = 0.5 * x0 @ hessians[0] @ x0
        worst = max(worst, float(np.max(np.abs(result.gains - gains))), abs(fwd.cost_after - optimum))
    return OracleResult('lqr', worst <= tol, worst, tol)


def check_conditioning(seed: int = 0, gaussians: int = 10, samples: int = 100_000, tol: float = 1e-2
                       ) -> OracleResult:
    """Conditional means against a least-squares fit on samples of the joint."""
    rng = np.random.default_rng(seed)
    block_dims = (3, 1, 2)
    k, m = 4, 2
    worst = 0.0
    for _ in range(gaussians):
        Sx = _random_spd(rng, k, 0.2)
        F = rng.standard_normal((m, k))
        mx = rng.standard_normal(k)
        f0 = rng.standard_normal(m)
        mean = np.concatenate([mx, F @ mx + f0])
        cov = np.block([[Sx, Sx @ F.T], [F @ Sx, F @ Sx @ F.T + 0.01 * np.eye(m)]])
        g = JointGaussian(mean, cov, block_dims)

        draws = rng.multivariate_normal(mean, g.cov, size=samples)
        X = np.hstack([draws[:, :k], np.ones((samples, 1))])
        coef, *_ = np.linalg.lstsq(X, draws[:, k:], rcond=None)
        queries = rng.multivariate_normal(mx, Sx, size=20)
        for xu in queries:
            fitted = np.append(xu, 1.0) @ coef
            worst = max(worst, float(np.max(np.abs(condition_gaussian(g, xu) - fitted))))
    return OracleResult('conditioning', worst <= tol, worst, tol)


def two_clusters(rng, per_cluster: int = 500) -> np.ndarray:
    centre = np.array([5.0, 5.0])
    return np.vstack([rng.standard_normal((per_cluster, 2)) + centre,
                      rng.standard_normal((per_cluster, 2)) - centre])


def check_em(seed: int = 0, datasets: int = 50, slack: float = 1e-9, recovery: float = 0.3) -> OracleResult:
    """Log-likelihood never decreases; two-cluster means recovered (reported error = worst mean offset)."""
    worst_drop = 0.0
    worst_offset = 0.0
    for d in range(datasets):
        rng = np.random.default_rng([seed, d])
        model = fit_em(two_clusters(rng), K=2, seed=d)
        ll = np.asarray(model.log_likelihoods)
        if ll.size > 1:
            worst_drop = max(worst_drop, float(np.max(ll[:-1] - ll[1:])))
        means = model.means[np.argsort(model.means[:, 0])]
        offset = max(np.max(np.abs(means[0] + 5.0)), np.max(np.abs(means[1] - 5.0)))
        worst_offset = max(worst_offset, float(offset))
    passed = worst_drop <= slack and worst_offset <= recovery
    return OracleResult('em', passed, worst_offset, recovery)


def _relative(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-8))


def check_policy_jacobian(seed: int = 0, points: int = 50, h: float = 1e-5, tol: float = 1e-4) -> OracleResult:
    rng = np.random.default_rng(seed)
    D = 8
    net = PolicyNet(rng.standard_normal((D, D)), 0.1 * rng.standard_normal(D), rng.standard_normal((2, D)),
                    rng.standard_normal(2), rng.standard_normal(D), rng.uniform(0.5, 2.0, D), standardized=True)
    worst = 0.0
    checked = 0
    while checked < points:
        x = net.input_mean + net.input_scale * rng.standard_normal(D)
        pre = net.W_hidden @ ((x - net.input_mean) / net.input_scale) + net.b_hidden
        if np.min(np.abs(pre)) < 1e-3:
            continue
        fd = np.empty((2, D))
        for j in range(D):
            step = np.zeros(D)
            step[j] = h
            fd[:, j] = (policy_forward(net, x + step) - policy_forward(net, x - step)) / (2 * h)
        worst = max(worst, _relative(policy_jacobian(net, x), fd))
        checked += 1
    return OracleResult('jacobian', worst <= tol, worst, tol)


def check_mse_gradient(seed: int = 0, points: int = 50, h: float = 1e-5, tol: float = 1e-4) -> OracleResult:
    """Loss gradients of a 4-input net against central differences at random parameters."""
    rng = np.random.default_rng(seed)
    D = 4
    worst = 0.0
    for _ in range(points):
        params = [rng.standard_normal((D, D)), rng.standard_normal(D), rng.standard_normal((1, D)),
                  rng.standard_normal(1)]
        S = rng.standard_normal((16, D))
        Y = rng.standard_normal((16, 1))
        _, grads = mse_and_gradients(params, S, Y)
        for p, g in zip(params, grads):
            fd = np.empty_like(p)
            for idx in np.ndindex(p.shape):
                saved = p[idx]
                p[idx] = saved + h
                up, _ = mse_and_gradients(params, S, Y)
                p[idx] = saved - h
                down, _ = mse_and_gradients(params, S, Y)
                p[idx] = saved
                fd[idx] = (up - down) / (2 * h)
            worst = max(worst, _relative(g, fd))
    return OracleResult('mse_gradient', worst <= tol, worst, tol)


def check_posterior(seed: int = 0, M: int = 4, horizon: int = 5, tol: float = 1e-12) -> OracleResult:
    """fit_dynamics (global prior) against the posterior formulas written out directly."""
    rng = np.random.default_rng(seed)
    layout = HistoryLayout(n=1, state_dim=2, control_dim=1)
    D = layout.aug_dim + layout.control_dim + layout.state_dim
    tuples = rng.standard_normal((M, horizon, D))
    model = fit_dynamics_from_tuples(tuples, layout, PriorSettings(prior='global'))

    pooled = tuples.reshape(-1, D)
    mu0 = pooled.mean(axis=0)
    Phi = (pooled - mu0).T @ (pooled - mu0) / pooled.shape[0]
    m = n = n0 = 1.0
    worst = 0.0
    for t in range(horizon):
        window = tuples[:, t, :]
        mu_hat = window.mean(axis=0)
        sigma_hat = (window - mu_hat).T @ (window - mu_hat) / M
        d = mu_hat - mu0
        mu = (m * mu0 + M * mu_hat) / (m + M)
        sigma = (Phi + M * sigma_hat + (M * m / (n + m)) * np.outer(d, d)) / (M + n0)
        g = model.per_timestep[t]
        worst = max(worst, float(np.max(np.abs(g.mean - mu))), float(np.max(np.abs(g.cov - sigma))))
    return OracleResult('posterior', worst <= tol, worst, tol)


ORACLES: dict[str, Callable[..., OracleResult]] = {
    'lqr': check_lqr,
    'conditioning': check_conditioning,
    'em': check_em,
    'jacobian': check_policy_jacobian,
    'mse_gradient': check_mse_gradient,
    'posterior': check_posterior,
}


def run_oracles(seed: int = 0, names=None) -> List[OracleResult]:
    results = []
    for name in names or ORACLES:
        if name not in ORACLES:
            raise ValueError(f"unknown oracle '{name}'")
        result = ORACLES[name](seed=seed)
        logger.info('%s', result.line())
        results.append(result)
    return results

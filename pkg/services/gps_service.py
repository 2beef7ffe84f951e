"""
GPS Service - Guided Policy Search Outer Loop
PID initialization, per-trajectory dynamics fits, the interleaved
trajectory-optimization / policy-fit inner loop and policy rollouts on the
delayed pouring simulator.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from services.core_service import ControlVec, Trajectory
from services.delay_service import HistoryBuffer, HistoryLayout, augment_for_policy, augmented_trajectory, push, \
    transition_tuples
from services.dynamics_service import DynamicsModel, PriorSettings, fit_dynamics
from services.errors import GpsError, GpsRunError
from services.policy_service import PolicyNet, RegressionSet, fit_policy, policy_forward, synthesize_training_pairs
from services.pouring_service import PouringParams, PouringSim
from services.trajopt_service import MU_FACTOR, MU_MAX, MU_MIN, CostModel, backward_pass, forward_pass

logger = logging.getLogger(__name__)


def derive_seed(base: int, *keys: int) -> int:
    """Independent, reproducible sub-seed for one purpose/iteration/trajectory."""
    return int(np.random.SeedSequence([int(base), *[int(k) for k in keys]]).generate_state(1)[0])


# purposes for derive_seed
SEED_PID, SEED_GMM, SEED_SAMPLES, SEED_FIT, SEED_ROLLOUT, SEED_INIT = range(6)


def stop_rule_met(max_abs: float, threshold: float) -> bool:
    """max |error| within the threshold; a non-finite threshold disables the stop rule."""
    return bool(np.isfinite(threshold) and max_abs <= threshold)


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    errors: tuple
    mean: float
    std: float
    max_abs: float
    converged: bool
    lam: float
    policy_mse: float
    inner_costs: tuple = field(default=(), repr=False)

    @classmethod
    def from_errors(cls, iteration: int, errors: Sequence[float], threshold: float, lam: float,
                    policy_mse: float, inner_costs=()) -> 'IterationReport':
        arr = np.asarray(errors, dtype=np.float64)
        max_abs = float(np.max(np.abs(arr)))
        return cls(iteration=iteration, errors=tuple(float(e) for e in arr), mean=float(arr.mean()),
                   std=float(arr.std()), max_abs=max_abs, converged=stop_rule_met(max_abs, threshold), lam=lam,
                   policy_mse=policy_mse, inner_costs=tuple(inner_costs))


@dataclass
class GpsState:
    """Everything run_gps needs to continue: datasets, policy and schedules."""
    iteration: int
    datasets: List[List[Trajectory]]
    policy: Optional[PolicyNet]
    mus: List[float]
    reports: List[IterationReport] = field(default_factory=list)
    models: List[DynamicsModel] = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class InnerLoopResult:
    trajectories: list
    results: list
    policy: PolicyNet
    policy_mse: float
    costs: tuple
    mus: list
    backward_passes: int
    policy_fits: int


@dataclass(frozen=True)
class RolloutResult:
    trajectory: Trajectory
    error: float
    trace: list


def _map(fn, items, workers: int = 1) -> list:
    """Ordered map, optionally on a thread pool."""
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def pouring_params(cfg) -> PouringParams:
    e = cfg.env
    return PouringParams(dt=e.dt, outflow_gain=e.outflow_gain, cup_capacity=e.cup_capacity,
                         critical_margin=e.critical_margin, fall_delay=e.fall_delay, scale_delay=e.scale_delay,
                         filter_tau=e.filter_tau, resolution=e.resolution, velocity_limit=e.velocity_limit,
                         obs_noise=e.obs_noise)


def layout_for(cfg) -> HistoryLayout:
    return HistoryLayout(n=cfg.n)


def initial_fills(cfg) -> np.ndarray:
    """N fills on a uniform grid over [fill_min, fill_max]."""
    if cfg.N == 1:
        return np.array([cfg.env.fill_min])
    return np.linspace(cfg.env.fill_min, cfg.env.fill_max, cfg.N)


def lam_for_iteration(cfg, iteration: int) -> float:
    """lam_init doubled (lam_factor) every outer iteration, capped at lam_max; iteration is 0-based."""
    t = cfg.trajopt
    return float(min(t.lam_init * t.lam_factor ** iteration, t.lam_max))


class PidController:
    """Wrist velocity from the observed remaining-to-pour error.

    The D term acts on the per-step change in remaining grams.
    """

    def __init__(self, p: float, i: float, d: float, dt: float):
        self.p, self.i, self.d, self.dt = p, i, d, dt
        self.integral = 0.0

    def __call__(self, buf: HistoryBuffer, t: int) -> float:
        x = buf.current
        error = float(x[1])
        self.integral += error * self.dt
        return self.p * error + self.i * self.integral + self.d * float(x[2])


class PolicyController:
    def __init__(self, policy: PolicyNet):
        self.policy = policy

    def __call__(self, buf: HistoryBuffer, t: int) -> float:
        return float(policy_forward(self.policy, augment_for_policy(buf))[0])


def rollout(sim: PouringSim, controller: Callable, fill: float, target: float, horizon: int, layout: HistoryLayout,
            seed: int = 0, control_noise: float = 0.0) -> RolloutResult:
    """Run a controller for the full horizon; controls are clamped at execution."""
    obs = sim.reset(fill, target, seed=seed)
    rng = np.random.default_rng(seed)
    limit = sim.params.velocity_limit
    buf = HistoryBuffer.start(layout, obs.as_array())
    states, controls, trace = [obs.as_array()], [], []
    for t in range(horizon):
        raw = controller(buf, t)
        if not np.isfinite(raw):
            raise ValueError(f'controller produced a non-finite control at t={t}')
        if control_noise > 0:
            raw += control_noise * float(rng.standard_normal())
        u = ControlVec.clamped(raw, limit)
        sim.step(u)
        obs = sim.observe()
        trace.append(sim.trace_row(t, u.wrist_velocity))
        states.append(obs.as_array())
        controls.append(u.as_array())
        buf = push(buf, obs, u)
    return RolloutResult(Trajectory(np.array(states), np.array(controls)), pour_error(sim), trace)


def pour_error(sim: PouringSim) -> float:
    """Target minus grams landed in the bowl (positive = under-pour); water in flight does not count."""
    return sim.target - sim.bowl


def initialize_trajectories(cfg, env_factory: Callable[[], PouringSim] = None) -> List[RolloutResult]:
    """PID rollouts from every initial fill, gains jittered per trajectory."""
    env_factory = env_factory or (lambda: PouringSim(pouring_params(cfg)))
    layout = layout_for(cfg)
    out = []
    for i, fill in enumerate(initial_fills(cfg)):
        rng = np.random.default_rng(derive_seed(cfg.seed, SEED_PID, i))
        jitter = 1.0 + cfg.pid_jitter * rng.uniform(-1.0, 1.0, size=3)
        pid = PidController(cfg.pid_p * jitter[0], cfg.pid_i * jitter[1], cfg.pid_d * jitter[2], cfg.env.dt)
        out.append(rollout(env_factory(), pid, float(fill), cfg.env.target, cfg.T, layout,
                           seed=derive_seed(cfg.seed, SEED_ROLLOUT, 0, i)))
    return out


def prior_settings(cfg, iteration: int, traj: int) -> PriorSettings:
    g = cfg.gmm
    return PriorSettings(prior=g.prior, K=g.K, max_iters=g.max_iters, tol=g.tol, floor=g.floor,
                         seed=derive_seed(cfg.seed, SEED_GMM, iteration, traj),
                         pool_trajectories=g.pool_trajectories)


def fit_models(cfg, datasets: Sequence[Sequence[Trajectory]], iteration: int) -> List[DynamicsModel]:
    layout = layout_for(cfg)
    gmm_data = None
    if cfg.gmm.pool_trajectories:
        pooled = [transition_tuples(ds, layout) for ds in datasets]
        gmm_data = np.vstack([p.reshape(-1, p.shape[-1]) for p in pooled])

    def fit(i):
        try:
            return fit_dynamics(datasets[i], layout, prior_settings(cfg, iteration, i), gmm_data=gmm_data)
        except (GpsError, ValueError, np.linalg.LinAlgError) as exc:
            raise GpsRunError(f'trajectory {i}: dynamics fit failed: {exc}',
                              context={'stage': 'fit_dynamics', 'trajectory': i}) from exc

    return _map(fit, range(len(datasets)), cfg.workers)


def inner_loop(models: Sequence[DynamicsModel], trajectories: Sequence[Trajectory], policy: Optional[PolicyNet],
               cfg, lam: float, mus: Sequence[float], iteration: int = 0) -> InnerLoopResult:
    """inner_iters rounds of one backward/forward pass per trajectory, then one policy fit.

    ``trajectories`` are the nominals in augmented coordinates; the spread of
    these sets the sampling noise for the gains-based pairs.
    """
    if cfg.inner_iters < 1:
        raise ValueError('inner_iters must be >= 1')
    layout = layout_for(cfg)
    t_cfg, p_cfg = cfg.trajopt, cfg.policy
    cost = CostModel.pouring(layout, w_u=t_cfg.w_u, w_r=t_cfg.w_r, w_T=t_cfg.w_T, lam=lam)
    trajectories = list(trajectories)
    spreads = [p_cfg.sigma_fraction * traj.states.std(axis=0) for traj in trajectories]
    limit = cfg.env.velocity_limit
    mus = list(mus)
    costs = []
    backward_passes = policy_fits = 0
    mse = float('nan')
    results = []

    for inner in range(cfg.inner_iters):
        def optimize(i, policy=policy):
            try:
                result = backward_pass(models[i], trajectories[i], cost, policy, mu=mus[i])
                fwd = forward_pass(models[i], result, cost, policy, limit=limit)
            except (GpsError, ValueError, np.linalg.LinAlgError) as exc:
                raise GpsRunError(f'trajectory {i}: {exc}', context={'stage': 'trajopt', 'trajectory': i,
                                                                      'inner_iteration': inner}) from exc
            return result, fwd

        outcomes = _map(optimize, range(len(models)), cfg.workers)
        backward_passes += len(outcomes)
        results = []
        round_costs = []
        for i, (result, fwd) in enumerate(outcomes):
            trajectories[i] = fwd.trajectory
            mu = result.mu
            if not fwd.improved:
                mu = min(max(mu * MU_FACTOR, MU_MIN), MU_MAX)
            mus[i] = mu
            results.append(result.with_open_loop(fwd.trajectory))
            round_costs.append((fwd.cost_before, fwd.cost_after))
        costs.append(tuple(round_costs))

        sets = []
        for i, result in enumerate(results):
            sets.append(synthesize_training_pairs(
                result, spreads[i], K=p_cfg.samples_per_step,
                seed=derive_seed(cfg.seed, SEED_SAMPLES, iteration, inner, i), traj_index=i,
                policy_input=layout.policy_input, limit=limit))
        data = RegressionSet.concatenate(sets)
        if policy is None:
            policy = PolicyNet.initialize(layout.policy_dim, layout.control_dim, seed=derive_seed(cfg.seed, SEED_INIT),
                                          inputs=data.inputs)
        try:
            fit = fit_policy(policy, data, epochs=p_cfg.epochs, learning_rate=p_cfg.learning_rate,
                             seed=derive_seed(cfg.seed, SEED_FIT, iteration, inner), batch_size=p_cfg.batch_size,
                             momentum=p_cfg.momentum)
        except GpsError as exc:
            raise GpsRunError(str(exc), context={'stage': 'fit_policy', 'inner_iteration': inner}) from exc
        policy, mse = fit.net, fit.mse
        policy_fits += 1
        logger.debug('Inner iteration %d: policy mse=%.6g over %d pairs', inner, mse, len(data))

    return InnerLoopResult(trajectories=trajectories, results=results, policy=policy, policy_mse=mse,
                           costs=tuple(costs), mus=mus, backward_passes=backward_passes, policy_fits=policy_fits)


def rollout_policy(cfg, policy: PolicyNet, iteration: int, env_factory: Callable[[], PouringSim] = None
                   ) -> List[RolloutResult]:
    env_factory = env_factory or (lambda: PouringSim(pouring_params(cfg)))
    layout = layout_for(cfg)
    fills = initial_fills(cfg)

    def run(i):
        return rollout(env_factory(), PolicyController(policy), float(fills[i]), cfg.env.target, cfg.T, layout,
                       seed=derive_seed(cfg.seed, SEED_ROLLOUT, iteration, i), control_noise=cfg.control_noise)

    return _map(run, range(len(fills)), cfg.workers)


def initial_state(cfg, env_factory: Callable[[], PouringSim] = None, on_rollout: Callable = None) -> GpsState:
    initial = initialize_trajectories(cfg, env_factory)
    if on_rollout is not None:
        for i, r in enumerate(initial):
            on_rollout(0, i, r)
    return GpsState(iteration=0, datasets=[[r.trajectory] for r in initial], policy=None,
                    mus=[cfg.trajopt.mu_init] * cfg.N)


def run_gps(cfg, state: Optional[GpsState] = None, env_factory: Callable[[], PouringSim] = None,
            on_iteration: Callable = None, on_rollout: Callable = None) -> List[IterationReport]:
    """Outer loop until every trajectory pours within the threshold or max_outer_iters.

    ``on_iteration(report, state)`` fires after each outer iteration;
    ``on_rollout(iteration, traj_index, rollout)`` for every policy rollout.
    """
    state = state or initial_state(cfg, env_factory, on_rollout)
    layout = layout_for(cfg)
    if state.reports and stop_rule_met(state.reports[-1].max_abs, cfg.convergence_threshold):
        return list(state.reports)
    while state.iteration < cfg.max_outer_iters:
        iteration = state.iteration
        lam = lam_for_iteration(cfg, iteration)
        context = {'iteration': iteration + 1, 'lam': lam, 'M': [len(ds) for ds in state.datasets]}
        try:
            models = fit_models(cfg, state.datasets, iteration)
            nominals = [augmented_trajectory(ds[-1], layout) for ds in state.datasets]
            inner = inner_loop(models, nominals, state.policy, cfg, lam, state.mus, iteration)
            rollouts = rollout_policy(cfg, inner.policy, iteration + 1, env_factory)
        except GpsRunError as exc:
            exc.context = {**context, **exc.context}
            raise
        except Exception as exc:
            raise GpsRunError(f'{type(exc).__name__}: {exc}', context=context) from exc

        for i, r in enumerate(rollouts):
            state.datasets[i].append(r.trajectory)
            if on_rollout is not None:
                on_rollout(iteration + 1, i, r)
        state.policy = inner.policy
        state.mus = inner.mus
        state.models = models
        state.iteration = iteration + 1

        report = IterationReport.from_errors(
            state.iteration, [r.error for r in rollouts], cfg.convergence_threshold, lam, inner.policy_mse,
            inner_costs=inner.costs)
        state.reports.append(report)
        logger.info('Iteration %d: mean error %.2f g, std %.2f g, max |error| %.2f g, policy mse %.4g',
                    report.iteration, report.mean, report.std, report.max_abs, report.policy_mse)
        if on_iteration is not None:
            on_iteration(report, state)
        if report.converged:
            logger.info('Converged after %d iterations', report.iteration)
            break
    return list(state.reports)


def evaluate_policy(cfg, policy: PolicyNet, env_factory: Callable[[], PouringSim] = None) -> List[float]:
    """Pour errors of a saved policy from every initial fill."""
    return [r.error for r in rollout_policy(cfg, policy, 0, env_factory)]

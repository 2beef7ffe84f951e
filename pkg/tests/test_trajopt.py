from dataclasses import replace

import numpy as np
import pytest

from services.delay_service import HistoryLayout
from services.errors import BackwardPassDivergedError
from services.linear_env_service import random_system
from services.oracle_service import check_lqr, riccati_recursion
from services.policy_service import PolicyNet, policy_forward
from services.trajopt_service import (
    MU_INIT, CostModel, backward_pass, forward_pass, modified_cost, rollout_gains, trajectory_cost,
)


def lq_problem(rng, dx=4, du=1, horizon=30):
    env = random_system(rng, dx, du, horizon)
    Q = np.diag(rng.uniform(0.5, 2.0, dx))
    R = np.diag(rng.uniform(0.1, 1.0, du))
    Qf = 5 * np.eye(dx)
    return env, CostModel(Q, R, Qf)


def linear_policy(rng, dx):
    """W_hidden = 0 and b_hidden = 1 make the product network the linear map W_out x + b_out."""
    return PolicyNet(np.zeros((dx, dx)), np.ones(dx), 0.1 * rng.standard_normal((1, dx)), np.array([0.05]),
                     np.zeros(dx), np.ones(dx), standardized=True)


def test_gains_match_riccati_on_random_systems():
    result = check_lqr(seed=2, systems=20)
    assert result.passed, result.line()


def test_inconsistent_nominal_still_reaches_the_lqr_optimum(rng):
    env, cost = lq_problem(rng)
    model = env.as_model()
    x0 = rng.standard_normal(4)
    nominal = env.rollout(x0, rng.standard_normal((30, 1)))
    scrambled = replace(nominal, states=np.vstack([x0, nominal.states[1:] + rng.standard_normal((30, 4))]))

    optimized = rollout_gains(model, backward_pass(model, scrambled, cost, mu=0.0), 1.0)

    _, hessians = riccati_recursion(model.A, model.B, cost.Q, cost.R, cost.Qf, 30)
    assert trajectory_cost(cost, None, optimized) == pytest.approx(0.5 * x0 @ hessians[0] @ x0, abs=1e-6)


def test_large_penalty_pins_controls_to_the_policy(rng):
    env, cost = lq_problem(rng)
    model = env.as_model()
    policy = linear_policy(rng, 4)
    cost = cost.with_lam(1e6)
    nominal = env.rollout(rng.standard_normal(4), np.zeros((30, 1)))

    fwd = forward_pass(model, backward_pass(model, nominal, cost, policy, mu=0.0), cost, policy)

    traj = fwd.trajectory
    for t in range(traj.horizon):
        assert abs(traj.controls[t, 0] - policy_forward(policy, traj.states[t])[0]) <= 1e-3


def test_levenberg_regularization_rescues_an_indefinite_control_hessian(rng):
    env, cost = lq_problem(rng, horizon=5)
    cost = replace(cost, R=-1e3 * np.eye(1))
    nominal = env.rollout(np.ones(4), np.zeros((5, 1)))

    result = backward_pass(env.as_model(), nominal, cost)

    assert result.mu > MU_INIT
    assert np.all(np.isfinite(result.gains))


def test_backward_pass_gives_up_past_the_regularization_cap(rng):
    env, cost = lq_problem(rng, horizon=3)
    cost = replace(cost, R=-1e11 * np.eye(1))
    nominal = env.rollout(np.ones(4), np.zeros((3, 1)))
    with pytest.raises(BackwardPassDivergedError, match='backward pass diverged'):
        backward_pass(env.as_model(), nominal, cost)


def test_forward_pass_keeps_the_nominal_when_nothing_improves(rng):
    env, cost = lq_problem(rng, horizon=10)
    model = env.as_model()
    nominal = env.rollout(rng.standard_normal(4), np.zeros((10, 1)))
    result = backward_pass(model, nominal, cost)
    bad = replace(result, feedforward=result.feedforward + 1e3)

    fwd = forward_pass(model, bad, cost, alphas=(1.0, 0.5))

    assert not fwd.improved
    assert fwd.trajectory is nominal
    assert fwd.cost_after == fwd.cost_before == pytest.approx(trajectory_cost(cost, None, nominal))


def test_horizon_mismatch_is_rejected(rng):
    env, cost = lq_problem(rng, horizon=10)
    other, _ = lq_problem(rng, horizon=6)
    with pytest.raises(ValueError):
        backward_pass(env.as_model(), other.rollout(np.zeros(4), np.zeros((6, 1))), cost)


def test_modified_cost_adds_the_policy_deviation(rng):
    policy = linear_policy(rng, 4)
    cost = CostModel(np.eye(4), np.eye(1), np.eye(4), lam=2.0)
    x, u = rng.standard_normal(4), np.array([0.7])

    deviation = u[0] - policy_forward(policy, x)[0]
    assert modified_cost(cost, policy, x, u) == pytest.approx(cost.task_cost(x, u) + 2.0 * deviation ** 2)
    assert modified_cost(cost, None, x, u) == cost.task_cost(x, u)


def test_pouring_cost_weights_the_current_remaining_grams():
    layout = HistoryLayout(n=3)
    cost = CostModel.pouring(layout, w_u=1e-3, w_r=1e-2, w_T=10.0)
    z = np.zeros(layout.aug_dim)
    z[layout.current_state_slice.start + 1] = 20.0
    z[1] = 50.0  # remaining grams in the oldest history slot are not penalized

    assert cost.task_cost(z, [2.0]) == pytest.approx(1e-2 * 400 + 1e-3 * 4)
    assert cost.terminal_cost(z) == pytest.approx(10.0 * 400)
    np.testing.assert_array_equal(cost.policy_input, layout.policy_selector())


def _optimal_trajectory(rng, horizon=20):
    env, cost = lq_problem(rng, horizon=horizon)
    model = env.as_model()
    x0 = rng.standard_normal(4)
    nominal = env.rollout(x0, rng.standard_normal((horizon, 1)))
    optimal = rollout_gains(model, backward_pass(model, nominal, cost, mu=0.0), 1.0)
    return model, cost, optimal


def test_stationary_nominal_gets_no_feedforward(rng):
    model, cost, optimal = _optimal_trajectory(rng)

    result = backward_pass(model, optimal, cost, mu=0.0)

    np.testing.assert_allclose(result.feedforward, 0.0, atol=1e-8)
    assert abs(result.expected_improvement) <= 1e-8


@pytest.mark.parametrize('radius', [0.1, 0.05, 0.01])
def test_feedback_gains_beat_open_loop_replay_from_perturbed_starts(rng, radius):
    model, cost, optimal = _optimal_trajectory(rng)
    result = backward_pass(model, optimal, cost, mu=0.0)
    open_loop = replace(result, gains=np.zeros_like(result.gains))

    for _ in range(10):
        eps = rng.standard_normal(4)
        z0 = optimal.states[0] + radius * eps / np.linalg.norm(eps)
        closed = trajectory_cost(cost, None, rollout_gains(model, result, 0.0, z0=z0))
        replay = trajectory_cost(cost, None, rollout_gains(model, open_loop, 0.0, z0=z0))
        assert closed <= replay + 1e-12


def test_rollouts_clip_controls_to_the_limit(rng):
    env, cost = lq_problem(rng, horizon=10)
    model = env.as_model()
    nominal = env.rollout(rng.standard_normal(4), np.full((10, 1), 5.0))
    result = backward_pass(model, nominal, cost)

    np.testing.assert_allclose(rollout_gains(model, result, 0.0).controls, 5.0)
    clipped = rollout_gains(model, result, 0.0, limit=0.5).controls
    assert clipped[0, 0] == 0.5
    assert np.abs(clipped).max() <= 0.5
    assert np.abs(rollout_gains(model, result, 1.0, limit=0.5).controls).max() <= 0.5

    fwd = forward_pass(model, result, cost, limit=0.5)
    if fwd.improved:
        assert np.abs(fwd.trajectory.controls).max() <= 0.5

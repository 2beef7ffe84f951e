import numpy as np
import pytest

from services.core_service import Trajectory
from services.errors import PolicyTrainingDivergedError
from services.oracle_service import check_mse_gradient, check_policy_jacobian
from services.policy_service import (
    PolicyNet, RegressionSet, fit_policy, policy_forward, policy_jacobian, synthesize_training_pairs, training_mse,
)
from services.trajopt_service import BackwardPassResult


def random_net(rng, D=6, out=1):
    return PolicyNet(rng.standard_normal((D, D)), rng.standard_normal(D), rng.standard_normal((out, D)),
                     rng.standard_normal(out), rng.standard_normal(D), rng.uniform(0.5, 2.0, D), standardized=True)


def reference_forward(net, x):
    s = (x - net.input_mean) / net.input_scale
    out = net.b_out.copy()
    for i in range(net.input_dim):
        h = max(0.0, float(net.W_hidden[i] @ s + net.b_hidden[i]))
        out += net.W_out[:, i] * h * s[i]
    return out


def test_forward_matches_reference_evaluator(rng):
    net = random_net(rng)
    for _ in range(100):
        x = rng.standard_normal(6) * 3
        np.testing.assert_allclose(policy_forward(net, x), reference_forward(net, x), atol=1e-12)


def test_batch_forward_equals_row_by_row(rng):
    net = random_net(rng)
    X = rng.standard_normal((7, 6))
    np.testing.assert_allclose(policy_forward(net, X), np.array([policy_forward(net, x) for x in X]), atol=1e-12)


def test_zero_weights_give_zero_control():
    net = PolicyNet.zeros(8)
    np.testing.assert_array_equal(policy_forward(net, np.arange(8.0)), [0.0])
    np.testing.assert_array_equal(policy_jacobian(net, np.arange(8.0)), np.zeros((1, 8)))


def test_input_dimension_is_checked(rng):
    net = random_net(rng)
    with pytest.raises(ValueError):
        policy_forward(net, np.zeros(5))
    with pytest.raises(ValueError):
        PolicyNet(np.zeros((3, 2)), np.zeros(3), np.zeros((1, 3)), np.zeros(1), np.zeros(3), np.ones(3))


def test_jacobian_matches_finite_differences():
    assert check_policy_jacobian(seed=3).passed


def test_loss_gradient_matches_finite_differences():
    assert check_mse_gradient(seed=3, points=5).passed


def test_fit_reduces_training_error_on_a_smooth_target(rng):
    X = rng.uniform(-1, 1, (400, 4))
    Y = (0.5 * X[:, :1] - 0.2 * X[:, 1:2] + 0.3 * X[:, 2:3] * X[:, 3:4])
    data = RegressionSet(X, Y, np.zeros(400), np.arange(400), np.zeros(400, dtype=bool))
    net = PolicyNet.initialize(4, seed=0, inputs=X)

    fit = fit_policy(net, data, epochs=60, learning_rate=1e-2, seed=0)

    assert fit.net.standardized
    assert fit.mse < training_mse(net, data)
    assert fit.mse == pytest.approx(training_mse(fit.net, data))


def test_initialize_freezes_the_input_transform_from_data(rng):
    X = rng.standard_normal((64, 4)) * 10 + 5
    X[:, 3] = 7.0
    net = PolicyNet.initialize(4, inputs=X)

    assert net.standardized
    np.testing.assert_allclose(net.input_mean, X.mean(axis=0))
    np.testing.assert_allclose(net.input_scale[:3], X[:, :3].std(axis=0))
    assert net.input_scale[3] == 1.0
    assert not PolicyNet.initialize(4).standardized


def test_fitting_never_changes_the_input_transform(rng):
    X = rng.standard_normal((64, 4)) * 10 + 5
    data = RegressionSet(X, rng.standard_normal((64, 1)), np.zeros(64), np.arange(64), np.zeros(64, dtype=bool))
    start = PolicyNet.initialize(4, inputs=X)
    first = fit_policy(start, data, epochs=2).net
    shifted = RegressionSet(X + 100, data.targets, data.traj_index, data.timestep, data.sampled)
    second = fit_policy(first, shifted, epochs=2).net

    for net in (first, second):
        np.testing.assert_array_equal(net.input_mean, start.input_mean)
        np.testing.assert_array_equal(net.input_scale, start.input_scale)
    unscaled = fit_policy(PolicyNet.initialize(4), data, epochs=1, learning_rate=1e-6).net
    assert not unscaled.standardized
    np.testing.assert_array_equal(unscaled.input_scale, np.ones(4))


def test_a_net_trained_on_its_own_outputs_stays_put(rng):
    X = rng.uniform(0, 300, (128, 4))
    net = PolicyNet.initialize(4, seed=5, inputs=X)
    data = RegressionSet(X, policy_forward(net, X), np.zeros(128), np.arange(128), np.zeros(128, dtype=bool))
    assert training_mse(net, data) == 0.0

    fit = fit_policy(net, data, epochs=20, learning_rate=1e-3, seed=1)

    assert fit.mse <= 1e-10
    np.testing.assert_allclose(policy_forward(fit.net, X), policy_forward(net, X), atol=1e-5)


def test_fits_are_bit_reproducible_for_a_seed(rng):
    X = rng.standard_normal((100, 4))
    data = RegressionSet(X, np.sin(X[:, :1]), np.zeros(100), np.arange(100), np.zeros(100, dtype=bool))
    net = PolicyNet.initialize(4, seed=2, inputs=X)

    a = fit_policy(net, data, epochs=10, learning_rate=1e-2, seed=9)
    b = fit_policy(net, data, epochs=10, learning_rate=1e-2, seed=9)

    for pa, pb in zip(a.net.params(), b.net.params()):
        np.testing.assert_array_equal(pa, pb)
    assert a.losses == b.losses
    c = fit_policy(net, data, epochs=10, learning_rate=1e-2, seed=10)
    assert not np.array_equal(a.net.W_hidden, c.net.W_hidden)


def test_output_is_quadratic_along_a_line_inside_one_activation_region(rng):
    net = random_net(rng, D=5)
    net = PolicyNet(net.W_hidden, np.full(5, 100.0), net.W_out, net.b_out, net.input_mean, net.input_scale,
                    standardized=True)
    x0, d = rng.standard_normal(5), 0.3 * rng.standard_normal(5)
    ts = np.array([0.0, 1.0, 2.0])
    for t in np.linspace(0.0, 2.0, 9):
        s = (x0 + t * d - net.input_mean) / net.input_scale
        assert np.all(net.W_hidden @ s + net.b_hidden > 0)

    u = [float(policy_forward(net, x0 + t * d)[0]) for t in ts]
    coeffs = np.polyfit(ts, u, 2)
    for t in (0.25, 0.5, 1.5, 1.9):
        expected = np.polyval(coeffs, t)
        assert float(policy_forward(net, x0 + t * d)[0]) == pytest.approx(expected, rel=1e-9, abs=1e-8)


def test_exploding_training_gives_up_after_halving(rng):
    X = rng.standard_normal((64, 4)) * 1e3
    data = RegressionSet(X, rng.standard_normal((64, 1)) * 1e150, np.zeros(64), np.arange(64),
                         np.zeros(64, dtype=bool))
    with pytest.raises(PolicyTrainingDivergedError, match='policy training diverged'):
        fit_policy(PolicyNet.initialize(4), data, epochs=5, learning_rate=1e3)


def test_fit_rejects_mismatched_data():
    net = PolicyNet.initialize(4)
    with pytest.raises(ValueError):
        fit_policy(net, RegressionSet(np.zeros((2, 3)), np.zeros((2, 1)), [0, 0], [0, 1], [False, False]))


def _result(rng, T=5, dz=4):
    traj = Trajectory(rng.standard_normal((T + 1, dz)), rng.standard_normal((T, 1)))
    return BackwardPassResult(open_loop=traj, gains=rng.standard_normal((T, 1, dz)), feedforward=np.zeros((T, 1)),
                              value_gradients=np.zeros((T + 1, dz)), value_hessians=np.zeros((T + 1, dz, dz)),
                              expected_improvement=0.0)


def test_synthesized_targets_follow_the_gains(rng):
    result = _result(rng)
    data = synthesize_training_pairs(result, sigma=0.1, K=20, seed=4)

    assert len(data) == 5 * 21
    for row in range(len(data)):
        t = data.timestep[row]
        expected = result.open_loop.controls[t] + result.gains[t] @ (data.inputs[row] - result.open_loop.states[t])
        np.testing.assert_allclose(data.targets[row], expected, atol=1e-12)


def test_synthesis_with_zero_samples_is_the_nominal_only(rng):
    result = _result(rng)
    data = synthesize_training_pairs(result, sigma=0.1, K=0)

    np.testing.assert_array_equal(data.inputs, result.open_loop.states[:-1])
    np.testing.assert_array_equal(data.targets, result.open_loop.controls)
    assert not data.sampled.any()
    with pytest.raises(ValueError):
        synthesize_training_pairs(result, sigma=0.1, K=-1)

import numpy as np
import pytest
from scipy.optimize import linprog
from scipy.stats import multivariate_normal

from services.core_service import empirical_moments
from services.gmm_service import GmmModel, fit_em, gmm_prior, window_log_weights
from services.oracle_service import two_clusters


def test_two_clusters_are_recovered(rng):
    model = fit_em(two_clusters(rng), K=2, seed=3)

    means = model.means[np.argsort(model.means[:, 0])]
    np.testing.assert_allclose(means[0], [-5.0, -5.0], atol=0.3)
    np.testing.assert_allclose(means[1], [5.0, 5.0], atol=0.3)
    np.testing.assert_allclose(model.weights, [0.5, 0.5], atol=0.05)


@pytest.mark.parametrize('seed', range(10))
def test_log_likelihood_never_decreases(seed):
    rng = np.random.default_rng(seed)
    data = np.vstack([rng.standard_normal((60, 3)) * s + c for s, c in ((1.0, 0.0), (0.3, 4.0), (2.0, -3.0))])

    model = fit_em(data, K=3, seed=seed, max_iters=50)

    ll = np.asarray(model.log_likelihoods)
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[1:]).max())


def test_fit_em_is_deterministic_for_a_seed(rng):
    data = two_clusters(rng, per_cluster=50)
    a = fit_em(data, K=2, seed=11)
    b = fit_em(data, K=2, seed=11)
    np.testing.assert_array_equal(a.means, b.means)
    assert a.log_likelihoods == b.log_likelihoods


def test_fit_em_validates_component_count():
    with pytest.raises(ValueError):
        fit_em(np.zeros((3, 2)), K=4)
    with pytest.raises(ValueError):
        fit_em(np.zeros((3, 2)), K=0)


def test_identical_points_still_give_positive_definite_components():
    data = np.ones((20, 2))
    model = fit_em(data, K=2, seed=0)
    for cov in model.covs:
        assert np.linalg.eigvalsh(cov).min() > 0


def _hand_model():
    return GmmModel(
        weights=np.array([0.3, 0.7]),
        means=np.array([[0.0, 0.0], [2.0, 1.0]]),
        covs=np.array([np.eye(2), [[2.0, 0.4], [0.4, 1.0]]]),
    )


def test_prior_matches_brute_force_window_likelihood():
    model = _hand_model()
    window = np.array([[0.5, 0.2], [1.5, 0.8], [1.0, 0.1]])

    joint = np.array([np.prod(multivariate_normal(model.means[k], model.covs[k]).pdf(window)) for k in range(2)])
    w = joint / joint.sum()
    Phi, mu0 = gmm_prior(model, window)

    np.testing.assert_allclose(mu0, w @ model.means, atol=1e-9)
    np.testing.assert_allclose(Phi, w[0] * model.covs[0] + w[1] * model.covs[1], atol=1e-9)


def test_remote_window_weights_stay_finite():
    model = _hand_model()
    window = np.full((10, 2), 1e3)

    log_w = window_log_weights(model, window)

    assert np.all(np.isfinite(log_w))
    np.testing.assert_allclose(np.exp(log_w).sum(), 1.0)


def test_window_dimension_must_match():
    with pytest.raises(ValueError):
        gmm_prior(_hand_model(), np.zeros((2, 3)))


def test_ten_identical_points_give_the_floor_covariance():
    model = fit_em(np.full((10, 3), 2.0), K=1, seed=0, floor=1e-8)

    np.testing.assert_array_equal(model.means[0], [2.0, 2.0, 2.0])
    np.testing.assert_allclose(model.covs[0], 1e-8 * np.eye(3), rtol=1e-12, atol=0)


def test_single_component_fit_is_the_empirical_moments(rng):
    data = rng.standard_normal((200, 3)) @ np.array([[1.0, 0.3, 0.0], [0.0, 2.0, 0.5], [0.0, 0.0, 0.7]]) + 4.0

    model = fit_em(data, K=1, seed=5)
    mean, cov = empirical_moments(data)

    np.testing.assert_allclose(model.weights, [1.0])
    np.testing.assert_allclose(model.means[0], mean, atol=1e-12)
    np.testing.assert_allclose(model.covs[0], cov, atol=1e-6)


@pytest.mark.parametrize('seed', range(5))
def test_prior_is_a_convex_combination_of_the_components(seed):
    rng = np.random.default_rng(seed)
    K, D = 4, 3
    factors = rng.standard_normal((K, D, D))
    model = GmmModel(weights=np.full(K, 1.0 / K), means=rng.standard_normal((K, D)) * 3,
                     covs=np.array([f @ f.T + 0.5 * np.eye(D) for f in factors]))
    window = rng.standard_normal((6, D)) * 2

    Phi, mu0 = gmm_prior(model, window)

    hull = linprog(np.zeros(K), A_eq=np.vstack([model.means.T, np.ones(K)]), b_eq=np.append(mu0, 1.0),
                   bounds=[(0, None)] * K)
    assert hull.status == 0
    traces = np.trace(model.covs, axis1=1, axis2=2)
    assert traces.min() - 1e-9 <= np.trace(Phi) <= traces.max() + 1e-9

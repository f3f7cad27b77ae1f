import math

import numpy as np
import pytest
import torch
from scipy import integrate

from causalpe.evaluation import two_cluster_ratio
from causalpe.reference import ReferenceConfig, slice_sample_reference, split_rhat
from causalpe.tasks import TASKS, LinearGaussian, analytic_posterior, hyperboloid_mean, make_task


@pytest.mark.parametrize("name", sorted(TASKS))
def test_task_contract(name):
    task = make_task(name)
    rng = np.random.default_rng(0)
    theta = task.prior_sample(rng, 10_000)
    assert theta.shape == (10_000, task.dim_theta)
    assert np.isfinite(task.prior_logpdf(theta)).all()
    x = task.simulate(theta, rng)
    assert x.shape == (10_000, task.dim_x)
    assert np.isfinite(x).all()
    assert sum(n.dim for n in task.dag.parameters) == task.dim_theta
    assert sum(n.dim for n in task.dag.data) == task.dim_x
    ll = task.log_likelihood(theta[:50], x[0])
    assert ll.shape == (50,) and not np.isnan(ll).any()
    theta_star, x_obs = task.generate_observation(rng)
    assert np.asarray(x_obs).shape == (task.dim_x,)


@pytest.mark.parametrize("name", sorted(TASKS))
def test_prior_logpdf_torch_matches_numpy(name):
    task = make_task(name)
    theta = task.prior_sample(np.random.default_rng(1), 20)
    lp_np = task.prior_logpdf(theta)
    lp_t = task.prior_logpdf(torch.as_tensor(theta)).numpy()
    assert np.allclose(lp_np, lp_t, rtol=1e-12, atol=1e-12)


def test_unknown_task():
    with pytest.raises(KeyError):
        make_task("lotka_volterra")


def test_linear_gaussian_noise_variance():
    task = make_task("linear_gaussian")
    x = task.simulate(np.zeros((10_000, 10)), np.random.default_rng(0))
    # sample variance of 1e4 normals has relative sd sqrt(2 / 1e4) ~ 1.4%
    assert np.allclose(x.var(0), 0.1, rtol=0.06)


def test_hyperboloid_mean_symmetry():
    task = make_task("hyperboloid")
    assert hyperboloid_mean(np.zeros(2), task.a1, task.a2) == 0.0
    assert hyperboloid_mean(np.array([1.0, 0.0]), task.a1, task.a2) == pytest.approx(1.0)


def test_two_moons_deterministic_part():
    task = make_task("two_moons")
    x = task.deterministic(np.zeros((1, 2)), 0.0, 0.1)
    assert np.allclose(x, [[0.35, 0.0]], atol=1e-15)


def test_two_moons_nuisance_not_in_theta():
    task = make_task("two_moons")
    assert task.dim_theta == 2
    assert [n.id for n in task.dag.parameters] == ["theta"]


def test_hierarchical_layout():
    task = make_task("hierarchical")
    dims = {n.id: n.dim for n in task.dag.parameters}
    assert dims == {"gamma": 2, "beta1": 2, "beta2": 2, "beta3": 2, "log_sigma": 1}
    assert task.dim_theta == 9 and task.dim_x == 6


def test_hierarchical_log_sigma_density():
    # sigma ~ half-normal(1) -> log sigma has density 2 phi(e^u) e^u
    task = make_task("hierarchical")
    theta = np.zeros((1, 9))
    u = 0.3
    theta[0, 8] = u
    base = task.prior_logpdf(np.zeros((1, 9)))[0] - (math.log(2) - 0.5 * math.log(2 * math.pi) - 0.5)
    lp = task.prior_logpdf(theta)[0] - base
    expected = math.log(2) - 0.5 * math.log(2 * math.pi) - 0.5 * math.exp(2 * u) + u
    assert lp == pytest.approx(expected, abs=1e-12)


def test_distractors_observation():
    task = make_task("distractors")
    theta_star, x = task.generate_observation(np.random.default_rng(0))
    assert theta_star is None
    assert x[0] == x[1] == 5.0 and x.shape == (10,)


def test_tree_means():
    task = make_task("tree")
    theta = np.array([[0.0, 1.0, 2.0]])
    assert np.allclose(task._means(theta), [[math.sin(1) ** 2, 1.0, 0.4, math.cos(2) ** 2]])


def test_gmm2_covariances_positive_definite():
    task = make_task("gaussian_mixture_2")
    for c in task.covariances:
        assert np.all(np.linalg.eigvalsh(c) > 0)


# normalization by quadrature

def _quad2(f, lo, hi, **kw):
    return integrate.dblquad(lambda b, a: f(np.array([[a, b]])), lo[0], hi[0], lo[1], hi[1], **kw)[0]


@pytest.mark.parametrize("name", ["gaussian_mixture_1", "two_moons", "hyperboloid"])
def test_box_prior_integrates_to_one(name):
    task = make_task(name)
    z = _quad2(lambda t: np.exp(task.prior_logpdf(t))[0], [task.low] * 2, [task.high] * 2)
    assert z == pytest.approx(1.0, abs=1e-3)


def test_distractors_prior_integrates_to_one():
    task = make_task("distractors")
    z = integrate.quad(lambda t: np.exp(task.prior_logpdf(np.array([[t]])))[0], -12, 12, points=[-10, 10])[0]
    assert z == pytest.approx(1.0, abs=1e-3)


def test_two_moons_likelihood_normalized():
    # polar coordinates around the moon centre absorb the 1/r factor of the density
    task = make_task("two_moons")
    theta = np.array([[0.7, -0.4]])
    centre = task.deterministic(theta, 0.0, 0.0)[0]

    def f(r, phi):
        xs = centre + r * np.array([math.cos(phi), math.sin(phi)])
        return r * np.exp(task.log_likelihood(theta, xs))[0]

    z = integrate.dblquad(f, -math.pi, math.pi, 0.0, 0.8, epsabs=1e-8)[0]
    assert z == pytest.approx(1.0, abs=1e-3)


def test_gmm1_likelihood_normalized():
    task = make_task("gaussian_mixture_1")
    theta = np.array([[1.0, -2.0]])
    f = lambda xs: np.exp(task.log_likelihood(theta, xs[0]))[0]  # noqa: E731
    z = _quad2(f, theta[0] - 8, theta[0] + 8, epsabs=1e-7)
    assert z == pytest.approx(1.0, abs=1e-3)


def test_slcp_likelihood_matches_simulator_moments():
    task = make_task("slcp")
    theta = np.array([[0.5, -1.0, 1.2, 0.7, 0.4]])
    x = task.simulate(np.repeat(theta, 20_000, 0), np.random.default_rng(0)).reshape(-1, 2)
    s1, s2, rho = 1.2**2, 0.7**2, math.tanh(0.4)
    cov = np.array([[s1**2, rho * s1 * s2], [rho * s1 * s2, s2**2]])
    assert np.allclose(np.cov(x.T), cov, rtol=0.03, atol=0.01)
    from scipy.stats import multivariate_normal
    pts = x[:4].reshape(1, 8)
    expected = multivariate_normal([0.5, -1.0], cov).logpdf(x[:4]).sum()
    assert task.log_likelihood(theta, pts[0])[0] == pytest.approx(expected, rel=1e-10)


# analytic posterior

def test_analytic_posterior():
    task = LinearGaussian()
    mean, cov = analytic_posterior(task, np.zeros(10))
    assert np.allclose(mean, 0) and np.allclose(cov, 0.05 * np.eye(10))
    mean, _ = analytic_posterior(task, np.ones(10))
    assert np.allclose(mean, 0.5)
    assert np.all(np.diag(cov) < task.variance)
    with pytest.raises(ValueError):
        analytic_posterior(make_task("two_moons"), np.zeros(2))


# reference sampler

def _mcse(draws):
    """Batch-means Monte Carlo standard error per dimension; draws is (chains, n, d)."""
    c, n, d = draws.shape
    batches = draws[:, : n - n % 25].reshape(c * 25, -1, d).mean(1)
    return batches.std(0, ddof=1) / math.sqrt(batches.shape[0])


def test_reference_linear_gaussian_matches_analytic():
    task = make_task("linear_gaussian")
    x_obs = task.simulate(np.full((1, 10), 0.3), np.random.default_rng(3))[0]
    ref = slice_sample_reference(task, x_obs, seed=0)
    mean, cov = analytic_posterior(task, x_obs)
    draws = ref.samples.reshape(4, -1, 10)
    assert np.all(np.abs(ref.samples.mean(0) - mean) <= 3 * _mcse(draws) + 1e-3)
    assert np.allclose(ref.samples.var(0), 0.05, rtol=0.15)
    assert max(ref.meta["rhat"]) < 1.05


def test_reference_two_moons_bimodal():
    task = make_task("two_moons")
    ref = slice_sample_reference(task, np.zeros(2), seed=0)
    assert ref.samples.shape == (5000, 2)
    assert two_cluster_ratio(ref.samples) > 1.5
    upper = (ref.samples.sum(1) > 0).mean()
    assert 0.35 < upper < 0.65


def test_reference_deterministic():
    task = make_task("gaussian_mixture_1")
    cfg = ReferenceConfig(samples=400, warmup=200)
    a = slice_sample_reference(task, np.ones(2), cfg, seed=4)
    b = slice_sample_reference(task, np.ones(2), cfg, seed=4)
    assert np.array_equal(a.samples, b.samples)
    assert a.samples.shape == (4 * 100, 2)


def test_reference_config_validation():
    with pytest.raises(ValueError):
        ReferenceConfig(samples=100, warmup=100)


def test_split_rhat_detects_stuck_chains():
    rng = np.random.default_rng(0)
    good = rng.normal(size=(4, 1000, 2))
    assert np.all(split_rhat(good) < 1.01)
    bad = good + np.array([0.0, 0.0, 5.0, 5.0])[:, None, None]
    assert np.all(split_rhat(bad) > 1.5)

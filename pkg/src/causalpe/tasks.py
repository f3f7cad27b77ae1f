"""Benchmark simulator models.

Every task exposes a prior sampler and log-density, a simulator, a tractable
log-likelihood (used only for reference MCMC), its prior-program DAG and an
observation generator. Parameters use the *natural* layout: the task's
parameter nodes concatenated in DAG order. Densities accept numpy arrays or
torch tensors of shape ``(n, d_theta)``; simulators and likelihoods are numpy only.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy.special import gammaln

from causalpe.graph import DATA, PARAMETER, Dag, Node

LOG_2PI = math.log(2.0 * math.pi)


def _xp(a):
    return torch if torch.is_tensor(a) else np


def _as_2d(theta):
    if torch.is_tensor(theta):
        return theta.reshape(-1, theta.shape[-1]) if theta.dim() != 2 else theta
    theta = np.asarray(theta, dtype=float)
    return theta.reshape(-1, theta.shape[-1]) if theta.ndim != 2 else theta


def normal_logpdf(x, mean, var):
    """Elementwise Gaussian log-density."""
    log_var = math.log(var) if np.isscalar(var) else _xp(var).log(var)
    return -0.5 * (LOG_2PI + log_var) - 0.5 * (x - mean) ** 2 / var


def uniform_box_logpdf(theta, low, high):
    xp = _xp(theta)
    inside = ((theta >= low) & (theta <= high)).all(-1)
    value = -theta.shape[-1] * math.log(high - low)
    if xp is np:
        return np.where(inside, value, -np.inf)
    return torch.where(inside, torch.full_like(theta[..., 0], value), torch.full_like(theta[..., 0], -math.inf))


class Task:
    """Base class; subclasses fill in the generative model."""

    name: str = ""
    dag: Dag

    @property
    def dim_theta(self) -> int:
        return self.dag.parameter_dim()

    @property
    def dim_x(self) -> int:
        return self.dag.data_dim()

    @property
    def parameter_nodes(self) -> tuple[Node, ...]:
        return self.dag.parameters

    def prior_sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def prior_logpdf(self, theta):
        raise NotImplementedError

    def simulate(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def log_likelihood(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_posterior_unnorm(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        theta = _as_2d(theta)
        lp = self.prior_logpdf(theta)
        out = np.full(theta.shape[0], -np.inf)
        ok = np.isfinite(lp)
        if ok.any():
            out[ok] = lp[ok] + self.log_likelihood(theta[ok], x)
        return out

    def generate_observation(self, rng: np.random.Generator) -> tuple[np.ndarray | None, np.ndarray]:
        theta = self.prior_sample(rng, 1)
        return theta[0], self.simulate(theta, rng)[0]

    def __repr__(self):
        return f"{type(self).__name__}(d_theta={self.dim_theta}, d_x={self.dim_x})"


class LinearGaussian(Task):
    """theta ~ N(0, s2 I_10), x | theta ~ N(theta, s2 I_10), s2 = 0.1.

    The model factorizes per coordinate, so each theta_i is its own node
    feeding only x_i.
    """

    name = "linear_gaussian"
    variance = 0.1
    d = 10

    def __init__(self):
        nodes = [Node(f"theta{i + 1}", PARAMETER) for i in range(self.d)]
        nodes += [Node(f"x{i + 1}", DATA) for i in range(self.d)]
        self.dag = Dag(nodes, [(f"theta{i + 1}", f"x{i + 1}") for i in range(self.d)])

    def prior_sample(self, rng, n):
        return rng.normal(0.0, math.sqrt(self.variance), size=(n, self.d))

    def prior_logpdf(self, theta):
        theta = _as_2d(theta)
        return normal_logpdf(theta, 0.0, self.variance).sum(-1)

    def simulate(self, theta, rng):
        theta = _as_2d(theta)
        return theta + rng.normal(0.0, math.sqrt(self.variance), size=theta.shape)

    def log_likelihood(self, theta, x):
        return normal_logpdf(np.asarray(x), _as_2d(theta), self.variance).sum(-1)


def analytic_posterior(task: Task, x_obs) -> tuple[np.ndarray, np.ndarray]:
    """Conjugate posterior of the linear Gaussian task: precisions add."""
    if not isinstance(task, LinearGaussian):
        raise ValueError(f"no analytic posterior for task {task.name!r}")
    x_obs = np.asarray(x_obs, dtype=float).reshape(-1)
    prior_prec = lik_prec = 1.0 / task.variance
    post_var = 1.0 / (prior_prec + lik_prec)
    mean = post_var * lik_prec * x_obs
    return mean, post_var * np.eye(task.d)


class GaussianMixture1(Task):
    """theta ~ U(-10, 10)^2, x ~ 0.5 N(theta, I) + 0.5 N(theta, 0.01 I)."""

    name = "gaussian_mixture_1"
    low, high = -10.0, 10.0
    narrow_variance = 0.01

    def __init__(self):
        self.dag = Dag([Node("theta", PARAMETER, 2), Node("x", DATA, 2)], [("theta", "x")])

    def prior_sample(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, 2))

    def prior_logpdf(self, theta):
        return uniform_box_logpdf(_as_2d(theta), self.low, self.high)

    def simulate(self, theta, rng):
        theta = _as_2d(theta)
        narrow = rng.random(theta.shape[0]) < 0.5
        scale = np.where(narrow, math.sqrt(self.narrow_variance), 1.0)[:, None]
        return theta + scale * rng.normal(size=theta.shape)

    def log_likelihood(self, theta, x):
        theta, x = _as_2d(theta), np.asarray(x)
        wide = normal_logpdf(x, theta, 1.0).sum(-1)
        narrow = normal_logpdf(x, theta, self.narrow_variance).sum(-1)
        return np.logaddexp(wide, narrow) + math.log(0.5)


class GaussianMixture2(Task):
    """theta ~ N_6(mu, I); x ~ equal mixture of three 2-D Gaussians on theta pairs."""

    name = "gaussian_mixture_2"
    prior_mean = np.array([-1.0, -1.0, 0.0, 0.0, 1.0, 1.0])
    covariances = (
        np.array([[0.7, 0.0], [0.0, 0.05]]),
        np.array([[0.7, 0.0], [0.0, 0.05]]),
        # printed as [[0.1, 0.95], [0.95, 1]], which is not positive definite;
        # 0.95 is used as the correlation
        np.array([[0.1, 0.95 * math.sqrt(0.1)], [0.95 * math.sqrt(0.1), 1.0]]),
    )

    def __init__(self):
        self.dag = Dag([Node("theta", PARAMETER, 6), Node("x", DATA, 2)], [("theta", "x")])
        self._chol = [np.linalg.cholesky(c) for c in self.covariances]
        self._prec = [np.linalg.inv(c) for c in self.covariances]
        self._logdet = [np.linalg.slogdet(c)[1] for c in self.covariances]

    def prior_sample(self, rng, n):
        return self.prior_mean + rng.normal(size=(n, 6))

    def prior_logpdf(self, theta):
        theta = _as_2d(theta)
        mean = self.prior_mean if not torch.is_tensor(theta) else torch.as_tensor(self.prior_mean, dtype=theta.dtype)
        return normal_logpdf(theta, mean, 1.0).sum(-1)

    def simulate(self, theta, rng):
        theta = _as_2d(theta)
        n = theta.shape[0]
        comp = rng.integers(0, 3, size=n)
        eps = rng.normal(size=(n, 2))
        out = np.empty((n, 2))
        for k in range(3):
            sel = comp == k
            out[sel] = theta[sel, 2 * k:2 * k + 2] + eps[sel] @ self._chol[k].T
        return out

    def log_likelihood(self, theta, x):
        theta, x = _as_2d(theta), np.asarray(x)
        terms = []
        for k in range(3):
            r = x - theta[:, 2 * k:2 * k + 2]
            quad = np.einsum("ni,ij,nj->n", r, self._prec[k], r)
            terms.append(-LOG_2PI - 0.5 * self._logdet[k] - 0.5 * quad)
        return np.logaddexp.reduce(np.stack(terms), axis=0) - math.log(3.0)


class Hierarchical(Task):
    """gamma ~ N_2(0, I), beta_k ~ N_2(gamma, I), sigma ~ N+(1), x ~ N([b1, b2, b3], sigma^2 I).

    The flow works on ``log_sigma`` so every coordinate is unconstrained; the
    prior density includes the log-Jacobian of ``sigma = exp(log_sigma)``.
    Layout: (gamma, beta1, beta2, beta3, log_sigma).
    """

    name = "hierarchical"

    def __init__(self):
        nodes = [Node("gamma", PARAMETER, 2)]
        nodes += [Node(f"beta{k}", PARAMETER, 2) for k in (1, 2, 3)]
        nodes += [Node("log_sigma", PARAMETER, 1), Node("x", DATA, 6)]
        edges = [("gamma", f"beta{k}") for k in (1, 2, 3)]
        edges += [(f"beta{k}", "x") for k in (1, 2, 3)] + [("log_sigma", "x")]
        self.dag = Dag(nodes, edges)

    def prior_sample(self, rng, n):
        gamma = rng.normal(size=(n, 2))
        betas = gamma[:, None, :] + rng.normal(size=(n, 3, 2))
        sigma = np.abs(rng.normal(size=(n, 1)))
        return np.concatenate([gamma, betas.reshape(n, 6), np.log(sigma)], axis=1)

    def prior_logpdf(self, theta):
        theta = _as_2d(theta)
        xp = _xp(theta)
        gamma, u = theta[:, :2], theta[:, 8]
        lp = normal_logpdf(gamma, 0.0, 1.0).sum(-1)
        for k in range(3):
            lp = lp + normal_logpdf(theta[:, 2 + 2 * k:4 + 2 * k], gamma, 1.0).sum(-1)
        sigma = xp.exp(u)
        return lp + math.log(2.0) - 0.5 * LOG_2PI - 0.5 * sigma**2 + u

    def simulate(self, theta, rng):
        theta = _as_2d(theta)
        sigma = np.exp(theta[:, 8:9])
        return theta[:, 2:8] + sigma * rng.normal(size=(theta.shape[0], 6))

    def log_likelihood(self, theta, x):
        theta = _as_2d(theta)
        var = np.exp(2.0 * theta[:, 8:9])
        return normal_logpdf(np.asarray(x), theta[:, 2:8], var).sum(-1)


def hyperboloid_mean(theta, p1, p2):
    """``| ||theta - p1|| - ||theta - p2|| |``."""
    theta = np.asarray(theta, dtype=float)
    return np.abs(np.linalg.norm(theta - p1, axis=-1) - np.linalg.norm(theta - p2, axis=-1))


class Hyperboloid(Task):
    """Two-component mixture of 10-D Student-t distributions with hyperbolic means."""

    name = "hyperboloid"
    low, high = -2.0, 2.0
    a1, a2 = np.array([-0.5, 0.0]), np.array([0.5, 0.0])
    b1, b2 = np.array([0.0, -0.5]), np.array([0.0, 0.5])
    df = 3.0
    variance = 0.01
    d_x = 10

    def __init__(self):
        self.dag = Dag([Node("theta", PARAMETER, 2), Node("x", DATA, self.d_x)], [("theta", "x")])

    def prior_sample(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, 2))

    def prior_logpdf(self, theta):
        return uniform_box_logpdf(_as_2d(theta), self.low, self.high)

    def simulate(self, theta, rng):
        theta = _as_2d(theta)
        n = theta.shape[0]
        first = rng.random(n) < 0.5
        loc = np.where(first, hyperboloid_mean(theta, self.a1, self.a2),
                       hyperboloid_mean(theta, self.b1, self.b2))
        z = rng.normal(size=(n, self.d_x))
        w = rng.chisquare(self.df, size=(n, 1)) / self.df
        return loc[:, None] + math.sqrt(self.variance) * z / np.sqrt(w)

    def _t_logpdf(self, x, loc):
        p, nu = self.d_x, self.df
        quad = ((x - loc[:, None]) ** 2).sum(-1) / self.variance
        return (gammaln((nu + p) / 2) - gammaln(nu / 2) - 0.5 * p * math.log(nu * math.pi)
                - 0.5 * p * math.log(self.variance) - 0.5 * (nu + p) * np.log1p(quad / nu))

    def log_likelihood(self, theta, x):
        theta, x = _as_2d(theta), np.asarray(x)
        la = self._t_logpdf(x, hyperboloid_mean(theta, self.a1, self.a2))
        lb = self._t_logpdf(x, hyperboloid_mean(theta, self.b1, self.b2))
        return np.logaddexp(la, lb) + math.log(0.5)


class Distractors(Task):
    """theta ~ U(-10, 10); x1, x2 ~ a N(theta, 1) + (1-a) N(-theta, s^2); x3..x10 ~ N(0, 1)."""

    name = "distractors"
    low, high = -10.0, 10.0
    alpha = 0.3
    sigma = 0.3
    n_distractors = 8
    observed_informative = 5.0

    def __init__(self):
        nodes = [Node("theta", PARAMETER, 1), Node("x_informative", DATA, 2),
                 Node("x_distractors", DATA, self.n_distractors)]
        self.dag = Dag(nodes, [("theta", "x_informative")])

    def prior_sample(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, 1))

    def prior_logpdf(self, theta):
        return uniform_box_logpdf(_as_2d(theta), self.low, self.high)

    def simulate(self, theta, rng):
        theta = _as_2d(theta)
        n = theta.shape[0]
        first = rng.random((n, 2)) < self.alpha
        informative = np.where(first, theta + rng.normal(size=(n, 2)),
                               -theta + self.sigma * rng.normal(size=(n, 2)))
        return np.concatenate([informative, rng.normal(size=(n, self.n_distractors))], axis=1)

    def log_likelihood(self, theta, x):
        theta, x = _as_2d(theta), np.asarray(x)
        xi = x[..., :2]
        a = math.log(self.alpha) + normal_logpdf(xi, theta, 1.0)
        b = math.log(1 - self.alpha) + normal_logpdf(xi, -theta, self.sigma**2)
        rest = normal_logpdf(x[..., 2:], 0.0, 1.0).sum(-1)
        return np.logaddexp(a, b).sum(-1) + rest

    def generate_observation(self, rng):
        x = np.concatenate([[self.observed_informative] * 2, rng.normal(size=self.n_distractors)])
        return None, x


class SLCP(Task):
    """Simple likelihood, complex posterior: four i.i.d. 2-D Gaussian draws."""

    name = "slcp"
    low, high = -3.0, 3.0
    n_draws = 4

    def __init__(self):
        self.dag = Dag([Node("theta", PARAMETER, 5), Node("x", DATA, 2 * self.n_draws)], [("theta", "x")])

    def prior_sample(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, 5))

    def prior_logpdf(self, theta):
        return uniform_box_logpdf(_as_2d(theta), self.low, self.high)

    @staticmethod
    def _moments(theta):
        s1, s2 = theta[:, 2] ** 2, theta[:, 3] ** 2
        return theta[:, :2], s1, s2, np.tanh(theta[:, 4])

    def simulate(self, theta, rng):
        theta = _as_2d(theta)
        mu, s1, s2, rho = self._moments(theta)
        eps = rng.normal(size=(theta.shape[0], self.n_draws, 2))
        x1 = mu[:, None, 0] + s1[:, None] * eps[..., 0]
        x2 = mu[:, None, 1] + s2[:, None] * (rho[:, None] * eps[..., 0]
                                             + np.sqrt(1 - rho[:, None] ** 2) * eps[..., 1])
        return np.stack([x1, x2], axis=-1).reshape(theta.shape[0], 2 * self.n_draws)

    def log_likelihood(self, theta, x):
        theta = _as_2d(theta)
        mu, s1, s2, rho = self._moments(theta)
        pts = np.asarray(x).reshape(-1, self.n_draws, 2)
        u1 = (pts[..., 0] - mu[:, None, 0]) / s1[:, None]
        u2 = (pts[..., 1] - mu[:, None, 1]) / s2[:, None]
        one_m = 1 - rho[:, None] ** 2
        q = (u1**2 - 2 * rho[:, None] * u1 * u2 + u2**2) / one_m
        ll = -LOG_2PI - np.log(s1 * s2)[:, None] - 0.5 * np.log(one_m) - 0.5 * q
        return ll.sum(-1)


class Tree(Task):
    """theta1 -> {theta2, theta3}; theta2 -> (x1, x2); theta3 -> (x3, x4)."""

    name = "tree"
    # (mean function, standard deviation) per observation dimension, in order
    noise = (0.2, 0.2, 0.6, 0.1)

    def __init__(self):
        nodes = [Node("theta1", PARAMETER), Node("theta2", PARAMETER), Node("theta3", PARAMETER),
                 Node("x12", DATA, 2), Node("x34", DATA, 2)]
        edges = [("theta1", "theta2"), ("theta1", "theta3"), ("theta2", "x12"), ("theta3", "x34")]
        self.dag = Dag(nodes, edges)

    def prior_sample(self, rng, n):
        t1 = rng.normal(size=n)
        t2 = t1 + rng.normal(size=n)
        t3 = t1 + rng.normal(size=n)
        return np.stack([t1, t2, t3], axis=1)

    def prior_logpdf(self, theta):
        theta = _as_2d(theta)
        return (normal_logpdf(theta[:, 0], 0.0, 1.0) + normal_logpdf(theta[:, 1], theta[:, 0], 1.0)
                + normal_logpdf(theta[:, 2], theta[:, 0], 1.0))

    @staticmethod
    def _means(theta):
        t2, t3 = theta[:, 1], theta[:, 2]
        return np.stack([np.sin(t2) ** 2, t2**2, 0.1 * t3**2, np.cos(t3) ** 2], axis=1)

    def simulate(self, theta, rng):
        theta = _as_2d(theta)
        return self._means(theta) + np.asarray(self.noise) * rng.normal(size=(theta.shape[0], 4))

    def log_likelihood(self, theta, x):
        var = np.asarray(self.noise) ** 2
        return normal_logpdf(np.asarray(x), self._means(_as_2d(theta)), var).sum(-1)


class TwoMoons(Task):
    """theta ~ U(-10, 10)^2 with nuisance angle a ~ U(-pi/2, pi/2) and radius r ~ N(0.1, 0.1^2).

    x = (r cos a + 0.25 - |theta1 + theta2| / sqrt 2, r sin a + (theta2 - theta1) / sqrt 2).
    Only theta is inferred; a and r are marginalized in the likelihood.
    """

    name = "two_moons"
    low, high = -10.0, 10.0
    r_mean, r_std = 0.1, 0.1

    def __init__(self):
        self.dag = Dag([Node("theta", PARAMETER, 2), Node("x", DATA, 2)], [("theta", "x")])

    def prior_sample(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, 2))

    def prior_logpdf(self, theta):
        return uniform_box_logpdf(_as_2d(theta), self.low, self.high)

    @staticmethod
    def shift(theta):
        theta = _as_2d(theta)
        s = theta[:, 0] + theta[:, 1]
        return np.stack([-np.abs(s), theta[:, 1] - theta[:, 0]], axis=1) / math.sqrt(2.0)

    def deterministic(self, theta, alpha, r):
        """Simulator output for given nuisance values."""
        base = np.stack([r * np.cos(alpha) + 0.25, r * np.sin(alpha)], axis=-1)
        return base + self.shift(theta)

    def simulate(self, theta, rng):
        theta = _as_2d(theta)
        n = theta.shape[0]
        alpha = rng.uniform(-math.pi / 2, math.pi / 2, size=n)
        r = rng.normal(self.r_mean, self.r_std, size=n)
        return self.deterministic(theta, alpha, r)

    def log_likelihood(self, theta, x):
        # v = r (cos a, sin a); a in (-pi/2, pi/2) fixes the sign of r by sign(v_1)
        v = np.asarray(x) - 0.25 * np.array([1.0, 0.0]) - self.shift(theta)
        rho = np.hypot(v[:, 0], v[:, 1])
        r = np.where(v[:, 0] >= 0, rho, -rho)
        log_r = normal_logpdf(r, self.r_mean, self.r_std**2)
        return log_r - math.log(math.pi) - np.log(rho)


TASKS = {
    cls.name: cls
    for cls in (LinearGaussian, GaussianMixture1, GaussianMixture2, Hierarchical, Hyperboloid,
                Distractors, SLCP, Tree, TwoMoons)
}


def make_task(name: str) -> Task:
    try:
        return TASKS[name]()
    except KeyError:
        raise KeyError(f"unknown task {name!r}; available: {', '.join(sorted(TASKS))}") from None


def __getattr__(name):
    # the reference sampler lives in its own module to keep this one import-light
    if name in ("slice_sample_reference", "ReferenceConfig"):
        from causalpe import reference

        return getattr(reference, name)
    raise AttributeError(name)

import math

import numpy as np
import pytest
import torch
from scipy.integrate import solve_ivp

from causalpe.cpeflow import CpeConfig
from causalpe.dcpeflow import DiscreteFlowNet
from causalpe.errors import NumericalError
from causalpe.estimator import Estimator, Standardizer, build_mask, build_net
from causalpe.samplers import (
    SampleSet,
    discrete_sample,
    dopri5_integrate,
    euler_integrate,
    euler_sample,
    rejection_filter,
    rk45_sample,
)
from causalpe.tasks import make_task

F64 = torch.float64


class FieldNet(torch.nn.Module):
    """Stand-in for a trained network with a closed-form field."""

    def __init__(self, task, fn):
        super().__init__()
        self.mask = build_mask(task)
        self.d_theta, self.d_x = task.dim_theta, task.dim_x
        self.fn = fn
        self.calls = 0

    @property
    def dtype(self):
        return F64

    def forward(self, t, theta, x):
        self.calls += 1
        return self.fn(t, theta)


def field_estimator(task_name, fn):
    task = make_task(task_name)
    return Estimator(task, FieldNet(task, fn), Standardizer.identity(task.dim_theta, task.dim_x))


# integrators

def test_euler_linear_decay_closed_form():
    z0 = torch.randn(50, 3, dtype=F64)
    z1 = euler_integrate(lambda t, z: -z, z0, 20)
    assert (z1 - z0 * (19 / 20) ** 20).abs().max().item() <= 1e-12


def test_euler_left_endpoint_times():
    seen = []
    euler_integrate(lambda t, z: (seen.append(t[0].item()), torch.zeros_like(z))[1], torch.zeros(1, 1, dtype=F64), 4)
    assert seen == [0.0, 0.25, 0.5, 0.75]


def test_euler_error_shrinks_with_steps():
    z0 = torch.ones(1, 1, dtype=F64)
    errs = [abs(euler_integrate(lambda t, z: -z, z0, T).item() - math.exp(-1)) for T in (5, 20, 80)]
    assert errs[0] > errs[1] > errs[2]
    # first-order method: error ratio ~ step ratio
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)


@pytest.mark.parametrize("T", [1, 3, 20])
def test_constant_field_exact(T):
    z0 = torch.randn(10, 2, dtype=F64)
    c = torch.tensor([0.5, -1.5], dtype=F64)
    assert torch.allclose(euler_integrate(lambda t, z: c.expand_as(z), z0, T), z0 + c, atol=1e-14)
    z1, ok = dopri5_integrate(lambda t, z: c.expand_as(z), z0)
    assert ok.all() and torch.allclose(z1, z0 + c, atol=1e-12)


def test_dopri5_linear_decay():
    z0 = torch.randn(100, 4, dtype=F64) * 3
    z1, ok = dopri5_integrate(lambda t, z: -z, z0)
    assert ok.all()
    assert (z1 - z0 * math.exp(-1)).abs().max().item() <= 1e-4


def test_dopri5_matches_scipy_on_nonlinear_field():
    def f_np(t, y):
        return np.sin(3 * y) + t * np.cos(y)

    def f_t(t, z):
        return torch.sin(3 * z) + t[:, None] * torch.cos(z)

    rng = np.random.default_rng(0)
    y0 = rng.normal(size=(20, 2)) * 2
    z1, ok = dopri5_integrate(f_t, torch.as_tensor(y0))
    assert ok.all()
    for i in range(20):
        ref = solve_ivp(f_np, (0, 1), y0[i], method="DOP853", rtol=1e-12, atol=1e-12).y[:, -1]
        assert np.abs(z1[i].numpy() - ref).max() <= 1e-4


def test_dopri5_adapts_per_trajectory():
    # a stiff-ish trajectory must not force small steps on the easy ones
    calls = []

    def f(t, z):
        calls.append(z.shape[0])
        rate = torch.tensor([1.0, 200.0], dtype=F64)[: z.shape[0]] if z.shape[0] <= 2 else 1.0
        return -rate[:, None] * z if z.shape[0] <= 2 else -z

    z1, ok = dopri5_integrate(f, torch.ones(2, 1, dtype=F64))
    assert ok.all()
    assert calls[-1] == 1  # only the hard trajectory is still being integrated at the end


def test_dopri5_discards_blowup():
    z0 = torch.tensor([[0.5], [2.0]], dtype=F64)
    # dz/dt = z^2 explodes at t = 1/z0, i.e. before t=1 for z0 = 2
    z1, ok = dopri5_integrate(lambda t, z: z**2, z0)
    assert ok.tolist() == [True, False]
    assert z1[0].item() == pytest.approx(1.0, abs=1e-4)  # 1/(1/0.5 - 1)


# rejection

def test_rejection_filter_counts():
    task = make_task("two_moons")
    cand = np.array([[0.0, 0.0], [1.0, 1.0], [11.0, 0.0], [-3.0, 2.0]])
    s = rejection_filter(cand, task.prior_logpdf)
    assert s.accepted == 3 and s.proposed == 4 and s.acceptance_rate == 0.75
    assert not np.any(s.samples == 11.0)
    gauss = rejection_filter(np.random.default_rng(0).normal(size=(100, 10)) * 50, make_task("linear_gaussian").prior_logpdf)
    assert gauss.acceptance_rate == 1.0


# end-to-end samplers with closed-form fields

def test_zero_field_returns_prior_draws():
    est = field_estimator("two_moons", lambda t, z: torch.zeros_like(z))
    s = euler_sample(est, np.zeros(2), 200, seed=3)
    draws = make_task("two_moons").prior_sample(np.random.default_rng(3), 200)
    assert np.array_equal(s.samples, draws)
    assert s.acceptance_rate == 1.0
    r = rk45_sample(est, np.zeros(2), 200, seed=3)
    assert np.array_equal(r.samples, draws)


def test_constant_field_shifts_draws():
    c = torch.tensor([0.25] * 10, dtype=F64)
    est = field_estimator("linear_gaussian", lambda t, z: c.expand_as(z))
    s = euler_sample(est, np.zeros(10), 100, seed=0)
    draws = make_task("linear_gaussian").prior_sample(np.random.default_rng(0), 100)
    assert np.allclose(s.samples, draws + 0.25, atol=1e-13)


def test_linear_decay_field_through_sampler():
    est = field_estimator("linear_gaussian", lambda t, z: -z)
    draws = make_task("linear_gaussian").prior_sample(np.random.default_rng(0), 100)
    e = euler_sample(est, np.zeros(10), 100, seed=0)
    assert np.abs(e.samples - draws * (19 / 20) ** 20).max() <= 1e-12
    r = rk45_sample(est, np.zeros(10), 100, seed=0)
    assert np.abs(r.samples - draws * math.exp(-1)).max() <= 1e-4


def test_out_of_support_samples_are_rejected_and_counted():
    # doubling uniform(-10, 10) draws leaves half of them outside the prior box
    est = field_estimator("gaussian_mixture_1", lambda t, z: z / (1 + t[:, None]))
    s = euler_sample(est, np.zeros(2), 2000, T=200, seed=1)
    assert s.accepted == 2000
    assert np.all(np.abs(s.samples) <= 10)
    assert 0.2 < s.acceptance_rate < 0.3


def test_proposal_cap_raises():
    est = field_estimator("gaussian_mixture_1", lambda t, z: torch.full_like(z, 100.0))
    with pytest.raises(NumericalError):
        euler_sample(est, np.zeros(2), 10, seed=0)


def test_nonfinite_trajectories_discarded():
    def f(t, z):
        v = torch.zeros_like(z)
        v[z[:, 0] > 5] = float("nan")
        return v

    est = field_estimator("gaussian_mixture_1", f)
    s = euler_sample(est, np.zeros(2), 500, seed=0)
    assert np.all(s.samples[:, 0] <= 5)
    assert s.meta["failed_trajectories"] > 0
    assert s.proposed > s.accepted


def test_seed_determinism():
    task = make_task("two_moons")
    net = build_net(task, "continuous", CpeConfig(block_size=8), seed=0)
    est = Estimator(task, net, Standardizer.identity(2, 2))
    a = euler_sample(est, np.zeros(2), 300, seed=5)
    b = euler_sample(est, np.zeros(2), 300, seed=5)
    assert np.array_equal(a.samples, b.samples) and a.proposed == b.proposed
    c = euler_sample(est, np.zeros(2), 300, seed=6)
    assert not np.array_equal(a.samples, c.samples)


# discrete sampling

def discrete_estimator(task_name, config=None):
    task = make_task(task_name)
    net = build_net(task, "discrete", config or CpeConfig(block_size=6, data_width=8, dtype="float64"), seed=0)
    return Estimator(task, net, Standardizer.identity(task.dim_theta, task.dim_x))


def test_discrete_identity_net_returns_prior_draws():
    est = discrete_estimator("tree")
    with torch.no_grad():
        est.net.gate.raw.fill_(100.0)
    s = discrete_sample(est, np.zeros(4), 50, seed=2)
    draws = make_task("tree").prior_sample(np.random.default_rng(2), 50)
    assert np.allclose(s.samples, draws, atol=1e-9)


def test_discrete_scaling_net():
    est = discrete_estimator("distractors", CpeConfig(n_layers=1, dtype="float64"))
    assert isinstance(est.net, DiscreteFlowNet)
    with torch.no_grad():
        est.net.gate.raw.fill_(math.log(1 / 3))
        est.net.stack.layers[0].diag_weight.fill_(math.log(1 / 3))
    # net maps theta -> theta / 2, so sampling doubles prior draws
    s = discrete_sample(est, np.zeros(10), 400, seed=0)
    assert np.all(np.abs(s.samples) <= 10)
    assert 0.4 < s.acceptance_rate < 0.6
    z = est.net(torch.as_tensor(s.samples), torch.zeros(1, 10, dtype=F64)).detach().numpy()
    assert np.allclose(z, s.samples / 2, atol=1e-12)


def test_discrete_round_trip():
    est = discrete_estimator("hierarchical")
    x = np.random.default_rng(0).normal(size=6)
    s = discrete_sample(est, x, 30, seed=1)
    z = est.net(est.theta_to_flow(s.samples), est.x_to_flow(x))
    draws = make_task("hierarchical").prior_sample(np.random.default_rng(1), 30)
    assert np.abs(est.theta_from_flow(z) - draws).max() <= 1e-8


def test_sampleset_csv_round_trip(tmp_path):
    s = SampleSet(np.random.default_rng(0).normal(size=(5, 3)), 7, "cpe", "euler20", 3, "tree", {"steps": 20})
    digest = s.save(tmp_path / "s.csv", tmp_path / "s.json")
    back = SampleSet.load(tmp_path / "s.csv", tmp_path / "s.json")
    assert np.array_equal(back.samples, s.samples)
    assert back.acceptance_rate == 5 / 7 and back.solver == "euler20"
    assert len(digest) == 64

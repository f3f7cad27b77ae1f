import numpy as np
import pytest
import torch

from causalpe.cpeflow import CpeConfig, VectorFieldNet, interpolate, jacobian_pattern, vector_field
from causalpe.errors import NumericalError, StructuralError
from causalpe.graph import Dag, Node, dependency_mask, invert_program, topological_sort

F64 = torch.float64
SMALL = CpeConfig(block_size=8, fourier_features=8, time_width=8, data_width=8, dtype="float64")


def fig1_mask():
    prior = Dag(
        [Node("theta1", "parameter"), Node("theta2", "parameter"), Node("theta3", "parameter"),
         Node("x1", "data"), Node("x2", "data")],
        [("theta1", "theta2"), ("theta1", "theta3"), ("theta2", "x1"), ("theta3", "x2")],
    )
    post = invert_program(prior)
    return dependency_mask(post, topological_sort(post))


def test_config_block_sizes():
    assert CpeConfig().block_sizes() == [(1, 64), (64, 64), (64, 1)]
    assert CpeConfig(n_layers=1).block_sizes() == [(1, 1)]
    with pytest.raises(StructuralError):
        CpeConfig(dtype="float16")


def test_zero_weights_give_half_theta():
    net = VectorFieldNet(fig1_mask(), 2, SMALL, seed=0)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    theta = torch.randn(4, 3, dtype=F64)
    v = vector_field(net, 0.3, theta, torch.randn(4, 2, dtype=F64))
    assert torch.equal(v, 0.5 * theta)


def test_gate_one_gives_identity():
    net = VectorFieldNet(fig1_mask(), 2, SMALL, seed=0)
    with torch.no_grad():
        net.gate.raw.fill_(60.0)
    theta = torch.randn(3, dtype=F64)
    for t in (0.0, 0.7):
        assert torch.allclose(vector_field(net, t, theta, torch.randn(2, dtype=F64)), theta)


def test_nonfinite_inputs_raise():
    net = VectorFieldNet(fig1_mask(), 2, SMALL, seed=0)
    with pytest.raises(NumericalError):
        vector_field(net, 0.1, [float("nan"), 0.0, 0.0], [0.0, 0.0])
    with pytest.raises(NumericalError):
        vector_field(net, float("inf"), [0.0, 0.0, 0.0], [0.0, 0.0])
    with pytest.raises(StructuralError):
        vector_field(net, 0.1, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0])


def test_fig1_jacobian_respects_mask():
    mask = fig1_mask()
    rng = np.random.default_rng(0)
    for seed in range(5):
        net = VectorFieldNet(mask, 2, SMALL, seed=seed)
        with torch.no_grad():
            for layer in net.stack.layers:
                layer.bias.normal_()
        pattern = jacobian_pattern(net, rng.random(), rng.normal(size=3), rng.normal(size=2))
        assert not np.any(pattern & ~mask.dim_mask)
        assert np.all(np.diag(pattern))
    # order is (theta3, theta2, theta1): output 0 (theta3) must ignore input 2 (theta1)
    assert mask.order == ("theta3", "theta2", "theta1")
    assert not mask.dim_mask[0, 2]


def test_identity_net_pattern_is_diagonal():
    net = VectorFieldNet(fig1_mask(), 2, SMALL, seed=0)
    with torch.no_grad():
        net.gate.raw.fill_(60.0)
    pattern = jacobian_pattern(net, 0.5, np.ones(3), np.zeros(2))
    assert np.array_equal(pattern, np.eye(3, dtype=bool))


def test_full_mask_has_no_violations():
    prior = Dag([Node("theta", "parameter", 3), Node("x", "data", 2)], [("theta", "x")])
    post = invert_program(prior)
    mask = dependency_mask(post, topological_sort(post))
    net = VectorFieldNet(mask, 2, SMALL, seed=0)
    pattern = jacobian_pattern(net, 0.2, np.ones(3), np.zeros(2))
    assert not np.any(pattern & ~mask.dim_mask)
    assert np.all(pattern[np.tril_indices(3)])


def test_conditioning_targets_are_data_children():
    mask = fig1_mask()
    assert mask.cond_targets == frozenset({"theta2", "theta3"})
    assert mask.target_dims.tolist() == [True, True, False]
    net = VectorFieldNet(mask, 2, SMALL, seed=0)
    theta = torch.randn(1, 3, dtype=F64)
    t = torch.tensor([0.3], dtype=F64)
    v1 = net(t, theta, torch.zeros(1, 2, dtype=F64))
    v2 = net(t, theta, torch.ones(1, 2, dtype=F64))
    assert not torch.allclose(v1[0, :2], v2[0, :2])


def test_same_seed_same_network():
    a = VectorFieldNet(fig1_mask(), 2, SMALL, seed=3)
    b = VectorFieldNet(fig1_mask(), 2, SMALL, seed=3)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    state = torch.random.get_rng_state()
    VectorFieldNet(fig1_mask(), 2, SMALL, seed=4)
    assert torch.equal(state, torch.random.get_rng_state())


def test_interpolate():
    t0, t1 = torch.zeros(2, dtype=F64), torch.tensor([4.0, 8.0], dtype=F64)
    assert torch.equal(interpolate(t0, t1, 0.0), t0)
    assert torch.equal(interpolate(t0, t1, 1.0), t1)
    assert torch.equal(interpolate(t0, t1, 0.25), torch.tensor([1.0, 2.0], dtype=F64))
    batch = interpolate(torch.zeros(2, 2), torch.ones(2, 2), torch.tensor([0.0, 0.5]))
    assert torch.equal(batch, torch.tensor([[0.0, 0.0], [0.5, 0.5]]))

"""Discrete (time-free) invertible CPE flow.

The network maps a posterior draw to the base (prior) space,
``z = gamma * theta + (1 - gamma) * lambda(theta, x)``. Diagonal blocks are
passed through ``exp`` and all hidden activations are ``tanh``, so each output
coordinate is strictly increasing in its own input while the Jacobian stays
lower-triangular. Density evaluation is a single forward pass; sampling
inverts the map coordinate by coordinate with bisection.
"""

from __future__ import annotations

import math
from typing import Callable

import torch
from torch import Tensor, nn

from causalpe.cpeflow import BlockStack, CpeConfig, _default_generator
from causalpe.errors import InversionError, NumericalError, StructuralError
from causalpe.graph import DependencyMask
from causalpe.netblocks import ConditionEmbedder, ConvexGate, log_tanh_derivative


def log_matmul(logA: Tensor, logB: Tensor) -> Tensor:
    """``log(exp(logA) @ exp(logB))`` via a max-shifted log-sum-exp.

    Broadcasts over leading batch dimensions like ``torch.matmul``.
    """
    if logA.shape[-1] != logB.shape[-2]:
        raise StructuralError("inner dimensions do not match")
    return torch.logsumexp(logA.unsqueeze(-1) + logB.unsqueeze(-3), dim=-2)


class DiscreteFlowNet(nn.Module):
    def __init__(self, mask: DependencyMask, d_x: int, config: CpeConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or CpeConfig()
        self.mask = mask
        self.d_theta = mask.dim
        self.d_x = d_x
        dtype = self.config.torch_dtype
        gen = torch.Generator().manual_seed(int(seed))
        with _default_generator(gen):
            self.embedder = ConditionEmbedder(
                d_x, use_time=False, data_width=self.config.data_width, generator=gen, dtype=dtype
            )
            self.stack = BlockStack(mask, self.embedder.out_features, self.config, "exp", gen)
        self.gate = ConvexGate(dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.config.torch_dtype

    def _check(self, theta: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
        if theta.dim() != 2 or theta.shape[1] != self.d_theta:
            raise StructuralError(f"theta must have shape (batch, {self.d_theta})")
        if x.dim() == 1:
            x = x.reshape(1, -1)
        if x.shape[0] == 1 and theta.shape[0] != 1:
            x = x.expand(theta.shape[0], -1)
        return theta, x

    def forward(self, theta: Tensor, x: Tensor) -> Tensor:
        theta, x = self._check(theta, x)
        return self.gate(theta, self.stack(theta, self.embedder(x)))

    def forward_logdet(self, theta: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(z, log|det dz/dtheta|)`` per batch row.

        The diagonal Jacobian entry of coordinate ``i`` is the product of the
        per-layer diagonal-block Jacobians ``diag(act') exp(B_ii)``; the
        product is accumulated in log space with :func:`log_matmul`.
        """
        theta, x = self._check(theta, x)
        c = self.embedder(x)
        h = theta.unsqueeze(-1)
        log_vec = None  # (batch, d, width, 1): log d h_i / d theta_i
        for k, layer in enumerate(self.stack.layers):
            pre = layer.preactivation(h)
            log_block = layer.diag_weight.unsqueeze(0)  # log g(B_ii) with g = exp
            if layer.activation == "tanh":
                h = torch.tanh(pre)
                log_block = log_block + log_tanh_derivative(pre).unsqueeze(-1)
            else:
                h = pre
            if log_vec is None:
                log_vec = log_block.expand(pre.shape[0], -1, -1, -1)
            else:
                log_vec = log_matmul(log_block, log_vec)
            if str(k) in self.stack.conditioners:
                h = self.stack.conditioners[str(k)](h, c)
        lam = h.squeeze(-1)
        log_dlam = log_vec.reshape(theta.shape[0], self.d_theta)
        g = self.gate.gamma
        z = g * theta + (1.0 - g) * lam
        log_diag = torch.logaddexp(torch.log(g).expand_as(log_dlam), torch.log1p(-g) + log_dlam)
        logdet = log_diag.sum(dim=-1)
        if not torch.isfinite(logdet).all():
            raise NumericalError("non-finite log-determinant")
        return z, logdet


def forward_logdet(net: DiscreteFlowNet, theta: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
    return net.forward_logdet(theta, x)


@torch.no_grad()
def invert(
    net: DiscreteFlowNet,
    z: Tensor,
    x: Tensor,
    tol: float = 1e-10,
    bracket: float = 10.0,
    max_bracket: float = 1e6,
    max_iter: int = 200,
) -> Tensor:
    """Solve ``net(theta, x) = z`` for ``theta`` by per-coordinate bisection.

    Coordinates are solved in topological order: output ``i`` depends only on
    inputs ``<= i``, so once the earlier coordinates are fixed the remaining
    problem is a monotone scalar root search. Brackets start at
    ``+-bracket`` and double until they contain the root.
    """
    z = torch.as_tensor(z, dtype=net.dtype)
    single = z.dim() == 1
    z = z.reshape(-1, net.d_theta)
    x = torch.as_tensor(x, dtype=net.dtype)
    if x.dim() == 1:
        x = x.reshape(1, -1)
    x = x.expand(z.shape[0], -1) if x.shape[0] == 1 else x
    n, d = z.shape
    theta = torch.zeros_like(z)

    def coord(i, value):
        probe = theta.clone()
        probe[:, i] = value
        return net(probe, x)[:, i]

    for i in range(d):
        target = z[:, i]
        lo = torch.full((n,), -bracket, dtype=z.dtype)
        hi = torch.full((n,), bracket, dtype=z.dtype)
        while True:
            f_lo, f_hi = coord(i, lo), coord(i, hi)
            low_bad, high_bad = f_lo > target, f_hi < target
            if not (low_bad.any() or high_bad.any()):
                break
            if (lo.abs() > max_bracket).any() or (hi.abs() > max_bracket).any():
                raise InversionError(f"no bracket within +-{max_bracket:g} for coordinate {i}")
            lo = torch.where(low_bad, 2 * lo, lo)
            hi = torch.where(high_bad, 2 * hi, hi)
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            f_mid = coord(i, mid)
            below = f_mid < target
            lo = torch.where(below, mid, lo)
            hi = torch.where(below, hi, mid)
            eps = torch.finfo(z.dtype).eps
            if ((hi - lo) <= 4 * eps * torch.maximum(lo.abs(), hi.abs()) + 1e-14).all():
                break
        # keep whichever endpoint lands closer to the target
        f_lo, f_hi = coord(i, lo), coord(i, hi)
        theta[:, i] = torch.where((f_lo - target).abs() <= (f_hi - target).abs(), lo, hi)

    resid = (net(theta, x) - z).abs().max()
    if not torch.isfinite(resid):
        raise InversionError("inversion produced non-finite values")
    if resid > tol:
        raise InversionError(f"inversion residual {resid.item():.3g} exceeds tolerance {tol:g}")
    return theta[0] if single else theta


def ml_loss(
    net: DiscreteFlowNet,
    theta: Tensor,
    x: Tensor,
    base_logpdf: Callable[[Tensor], Tensor],
) -> Tensor:
    """Negative log-likelihood of ``theta | x`` with the prior as base density.

    ``-mean[log pi(z) + log|det dz/dtheta|]`` where ``z = net(theta, x)``;
    ``base_logpdf`` must be a differentiable torch function of ``z``.
    """
    z, logdet = net.forward_logdet(theta, x)
    loss = -(base_logpdf(z) + logdet).mean()
    if not torch.isfinite(loss):
        raise NumericalError("non-finite ML loss (base density zero on the image?)")
    return loss


def standard_normal_logpdf(z: Tensor) -> Tensor:
    return -0.5 * (z**2).sum(-1) - 0.5 * z.shape[-1] * math.log(2 * math.pi)

"""Continuous-time CPE vector field.

``v_t(theta, x) = gamma * theta + (1 - gamma) * lambda_t(theta, x)`` where
``lambda_t`` is a stack of masked block layers whose first hidden state is
shifted by an embedding of ``(t, x)``. All tensors use the topological
parameter layout of the net's :class:`~causalpe.graph.DependencyMask`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor, nn

from causalpe.errors import NumericalError, StructuralError
from causalpe.graph import DependencyMask
from causalpe.netblocks import BlockLinear, ConditionEmbedder, Conditioning, ConvexGate

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class CpeConfig:
    n_layers: int = 3
    block_size: int = 64
    fourier_features: int = 64
    time_width: int = 64
    data_width: int = 128
    condition_every_layer: bool = False
    low_rank: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_layers < 1:
            raise StructuralError("n_layers must be at least 1")
        if self.block_size < 1:
            raise StructuralError("block_size must be positive")
        if self.dtype not in DTYPES:
            raise StructuralError(f"dtype must be one of {sorted(DTYPES)}")

    def block_sizes(self) -> list[tuple[int, int]]:
        """``(d_in, d_out)`` per layer; the outermost sizes are pinned to 1."""
        widths = [1] + [self.block_size] * (self.n_layers - 1) + [1]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


class BlockStack(nn.Module):
    """Masked block layers with conditioning after the first (or every hidden) layer."""

    def __init__(
        self,
        mask: DependencyMask,
        c_features: int,
        config: CpeConfig,
        diag_transform: str,
        generator: torch.Generator | None,
    ):
        super().__init__()
        dtype = config.torch_dtype
        sizes = config.block_sizes()
        self.layers = nn.ModuleList()
        self.conditioners = nn.ModuleDict()
        for k, (d_in, d_out) in enumerate(sizes):
            last = k == len(sizes) - 1
            self.layers.append(
                BlockLinear(
                    mask.dim_mask, d_in, d_out,
                    diag_transform=diag_transform,
                    activation="identity" if last else "tanh",
                    low_rank=config.low_rank,
                    generator=generator,
                    dtype=dtype,
                )
            )
            if not last and (k == 0 or config.condition_every_layer):
                self.conditioners[str(k)] = Conditioning(
                    c_features, mask.dim, d_out, mask.target_dims, dtype=dtype
                )

    def forward(self, theta: Tensor, c: Tensor) -> Tensor:
        h = theta.unsqueeze(-1)
        for k, layer in enumerate(self.layers):
            h = layer(h)
            if str(k) in self.conditioners:
                h = self.conditioners[str(k)](h, c)
        return h.squeeze(-1)


class VectorFieldNet(nn.Module):
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
                d_x, use_time=True,
                fourier_features=self.config.fourier_features,
                time_width=self.config.time_width,
                data_width=self.config.data_width,
                generator=gen, dtype=dtype,
            )
            self.stack = BlockStack(mask, self.embedder.out_features, self.config, "identity", gen)
        self.gate = ConvexGate(dtype=dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.config.torch_dtype

    def lam(self, t: Tensor, theta: Tensor, x: Tensor) -> Tensor:
        return self.stack(theta, self.embedder(x, t))

    def forward(self, t: Tensor, theta: Tensor, x: Tensor) -> Tensor:
        if theta.dim() != 2 or theta.shape[1] != self.d_theta:
            raise StructuralError(f"theta must have shape (batch, {self.d_theta})")
        if x.shape[0] != theta.shape[0] and x.shape[0] == 1:
            x = x.expand(theta.shape[0], -1)
        return self.gate(theta, self.lam(t, theta, x))

    def masked_parameters(self):
        """Parameters that carry a structural mask (all block weights)."""
        return [p for layer in self.stack.layers for p in layer.parameters()]


class _default_generator:
    """Route ``nn.Linear``'s default init through a private generator.

    ``nn.Linear`` draws from the global RNG; forking it keeps network
    construction reproducible without touching the caller's RNG state.
    """

    def __init__(self, gen: torch.Generator):
        self.seed = int(torch.randint(0, 2**62, (1,), generator=gen).item())

    def __enter__(self):
        self._fork = torch.random.fork_rng(devices=[])
        self._fork.__enter__()
        torch.manual_seed(self.seed)

    def __exit__(self, *exc):
        return self._fork.__exit__(*exc)


def _as_tensor(a, dtype) -> Tensor:
    return torch.as_tensor(np.asarray(a) if not isinstance(a, Tensor) else a, dtype=dtype)


def vector_field(net: VectorFieldNet, t, theta, x) -> Tensor:
    """Evaluate ``v_t(theta, x)``; accepts single points or batches."""
    dtype = net.dtype
    theta = _as_tensor(theta, dtype)
    x = _as_tensor(x, dtype)
    single = theta.dim() == 1
    theta = theta.reshape(-1, net.d_theta)
    if x.dim() == 1:
        if x.numel() != net.d_x:
            raise StructuralError(f"x must have {net.d_x} entries")
        x = x.reshape(1, -1)
    t = _as_tensor(t, dtype).reshape(-1)
    if t.numel() == 1:
        t = t.expand(theta.shape[0])
    for name, v in (("t", t), ("theta", theta), ("x", x)):
        if not torch.isfinite(v).all():
            raise NumericalError(f"non-finite {name}")
    out = net(t, theta, x)
    return out[0] if single else out


@torch.no_grad()
def jacobian_pattern(net, t, theta, x, eps: float = 1e-5, threshold: float = 1e-8) -> np.ndarray:
    """Boolean pattern of ``|dv_i/dtheta_j| > threshold`` by central differences.

    ``net`` is any callable ``(t, theta, x) -> v`` on batches.
    """
    theta = torch.as_tensor(theta).reshape(-1)
    d = theta.numel()
    x = torch.as_tensor(x).reshape(1, -1)
    steps = eps * torch.eye(d, dtype=theta.dtype)
    pts = torch.cat([theta + steps, theta - steps], dim=0)
    tt = torch.full((2 * d,), float(t), dtype=theta.dtype)
    v = net(tt, pts, x.expand(2 * d, -1))
    jac = (v[:d] - v[d:]).T / (2 * eps)  # [i, j] = dv_i / dtheta_j
    return (jac.abs() > threshold).cpu().numpy()


def interpolate(theta0, theta1, t):
    """Straight-line path ``t * theta1 + (1 - t) * theta0``."""
    if torch.is_tensor(t) and t.dim() == 1 and torch.is_tensor(theta0) and theta0.dim() == 2:
        t = t[:, None]
    return t * theta1 + (1 - t) * theta0

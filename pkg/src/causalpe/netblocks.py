"""Differentiable building blocks for the CPE networks.

Block layers act on hidden states of shape ``(batch, d_theta, width)``: every
parameter dimension owns a block of ``width`` hidden units. Only the blocks
allowed by the dimension-level dependency mask are stored, so forbidden
weights are structurally zero and never receive gradient.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from causalpe.errors import NumericalError, StructuralError

ACTIVATIONS = ("tanh", "identity")
DIAG_TRANSFORMS = ("identity", "exp")


def fourier_features(t: Tensor, frequencies: Tensor) -> Tensor:
    """Random Fourier features ``[sin(2 pi f t), cos(2 pi f t)]`` for each frequency."""
    t = torch.as_tensor(t, dtype=frequencies.dtype)
    if t.dim() == 0:
        t = t.reshape(1)
    arg = 2.0 * math.pi * t.reshape(-1, 1) * frequencies.reshape(1, -1)
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class FourierEmbedding(nn.Module):
    """Frozen random Fourier embedding of a scalar time."""

    def __init__(self, n_features: int = 64, scale: float = 1.0, generator=None):
        super().__init__()
        if n_features % 2:
            raise StructuralError("number of Fourier features must be even")
        freqs = torch.randn(n_features // 2, generator=generator, dtype=torch.float64) * scale
        self.register_buffer("frequencies", freqs)

    @property
    def out_features(self) -> int:
        return 2 * self.frequencies.numel()

    def forward(self, t: Tensor) -> Tensor:
        return fourier_features(t, self.frequencies)


def _activation(name: str) -> Callable[[Tensor], Tensor]:
    if name == "tanh":
        return torch.tanh
    if name == "identity":
        return lambda h: h
    raise StructuralError(f"unknown activation {name!r}")


def log_tanh_derivative(a: Tensor) -> Tensor:
    """``log(1 - tanh(a)^2)`` evaluated without cancellation."""
    return 2.0 * (math.log(2.0) - a - nn.functional.softplus(-2.0 * a))


def block_forward(
    B: Tensor,
    mask: Tensor,
    b: Tensor,
    h: Tensor,
    d_in: int,
    d_out: int,
    diag_transform: str = "identity",
    activation: str = "tanh",
) -> Tensor:
    """Dense reference implementation of a masked block layer.

    ``B`` has shape ``(d * d_out, d * d_in)`` and ``mask`` is the
    dimension-level boolean mask of shape ``(d, d)``. ``h`` is ``(batch, d * d_in)``.
    """
    d = mask.shape[0]
    if B.shape != (d * d_out, d * d_in):
        raise StructuralError(f"B has shape {tuple(B.shape)}, expected {(d * d_out, d * d_in)}")
    if h.shape[-1] != d * d_in:
        raise StructuralError(f"input width {h.shape[-1]} != {d * d_in}")
    full = torch.kron(mask.to(B.dtype), torch.ones(d_out, d_in, dtype=B.dtype))
    diag = torch.kron(torch.eye(d, dtype=B.dtype), torch.ones(d_out, d_in, dtype=B.dtype)).bool()
    if diag_transform == "exp":
        B = torch.where(diag, torch.exp(B), B)
    W = B * full
    return _activation(activation)(h @ W.T + b)


class BlockLinear(nn.Module):
    """Masked block-linear layer ``act(B h + b)``.

    Weights are stored per allowed block as a tensor of shape
    ``(n_blocks, d_out, d_in)``; block ``k`` maps input dimension ``cols[k]``
    to output dimension ``rows[k]``. Diagonal blocks pass through
    ``diag_transform`` before use. With ``low_rank`` the off-diagonal blocks are
    outer products of two trainable vectors.
    """

    def __init__(
        self,
        dim_mask: np.ndarray,
        d_in: int,
        d_out: int,
        diag_transform: str = "identity",
        activation: str = "tanh",
        low_rank: bool = False,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if diag_transform not in DIAG_TRANSFORMS:
            raise StructuralError(f"unknown diagonal transform {diag_transform!r}")
        if activation not in ACTIVATIONS:
            raise StructuralError(f"unknown activation {activation!r}")
        mask = np.asarray(dim_mask, dtype=bool)
        if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
            raise StructuralError("dimension mask must be square")
        self.d = mask.shape[0]
        self.d_in, self.d_out = int(d_in), int(d_out)
        self.diag_transform = diag_transform
        self.activation = activation
        self.low_rank = low_rank
        self.register_buffer("mask", torch.as_tensor(mask))

        rows, cols = np.nonzero(mask)
        on_diag = rows == cols
        self.register_buffer("diag_rows", torch.as_tensor(rows[on_diag]))
        self.register_buffer("off_rows", torch.as_tensor(rows[~on_diag]))
        self.register_buffer("off_cols", torch.as_tensor(cols[~on_diag]))

        # uniform(+-1/sqrt(fan_in)) with fan_in the number of live inputs of a row
        fan_in = mask.sum(axis=1) * self.d_in
        bound_diag = torch.as_tensor(1.0 / np.sqrt(fan_in[rows[on_diag]]), dtype=dtype)
        bound_off = torch.as_tensor(1.0 / np.sqrt(fan_in[rows[~on_diag]]), dtype=dtype)

        def uniform(shape, bound):
            u = torch.rand(shape, generator=generator, dtype=torch.float64).to(dtype)
            return (2.0 * u - 1.0) * bound.reshape(-1, *([1] * (len(shape) - 1)))

        diag = uniform((self.d, self.d_out, self.d_in), bound_diag)
        if diag_transform == "exp":
            # exp(raw) then has the same scale as an identity-transformed init
            diag = diag + torch.log(bound_diag).reshape(-1, 1, 1)
        self.diag_weight = nn.Parameter(diag)
        n_off = len(self.off_rows)
        if low_rank:
            # xi_k zeta_k^T then has entries of the same magnitude as the dense init
            self.xi = nn.Parameter(uniform((n_off, self.d_out), bound_off.sqrt()))
            self.zeta = nn.Parameter(uniform((n_off, self.d_in), bound_off.sqrt()))
        else:
            self.off_weight = nn.Parameter(uniform((n_off, self.d_out, self.d_in), bound_off))
        self.bias = nn.Parameter(torch.zeros(self.d, self.d_out, dtype=dtype))

    def diagonal_blocks(self) -> Tensor:
        """Diagonal blocks after ``diag_transform``, shape ``(d, d_out, d_in)``."""
        if self.diag_transform == "exp":
            return torch.exp(self.diag_weight)
        return self.diag_weight

    def off_diagonal_blocks(self) -> Tensor:
        if self.low_rank:
            return self.xi[:, :, None] * self.zeta[:, None, :]
        return self.off_weight

    def preactivation(self, h: Tensor) -> Tensor:
        if h.dim() != 3 or h.shape[1] != self.d or h.shape[2] != self.d_in:
            raise StructuralError(
                f"expected input of shape (batch, {self.d}, {self.d_in}), got {tuple(h.shape)}"
            )
        out = torch.einsum("bdi,doi->bdo", h, self.diagonal_blocks())
        if len(self.off_rows):
            y = torch.einsum("bki,koi->bko", h[:, self.off_cols], self.off_diagonal_blocks())
            out = out.index_add(1, self.off_rows, y)
        return out + self.bias

    def forward(self, h: Tensor) -> Tensor:
        return _activation(self.activation)(self.preactivation(h))

    def raw_matrix(self) -> Tensor:
        """Dense ``(d*d_out, d*d_in)`` matrix of raw (untransformed) weights, zero where masked."""
        M = torch.zeros(self.d, self.d_out, self.d, self.d_in, dtype=self.bias.dtype)
        idx = torch.arange(self.d)
        M[idx, :, idx, :] = self.diag_weight.detach()
        if len(self.off_rows):
            M[self.off_rows, :, self.off_cols, :] = self.off_diagonal_blocks().detach()
        return M.reshape(self.d * self.d_out, self.d * self.d_in)

    def load_raw_matrix(self, B: Tensor) -> None:
        """Set weights from a dense raw matrix; masked-out entries are ignored."""
        if self.low_rank:
            raise StructuralError("cannot load a dense matrix into a low-rank layer")
        M = torch.as_tensor(B, dtype=self.bias.dtype).reshape(self.d, self.d_out, self.d, self.d_in)
        idx = torch.arange(self.d)
        with torch.no_grad():
            self.diag_weight.copy_(M[idx, :, idx, :])
            if len(self.off_rows):
                self.off_weight.copy_(M[self.off_rows, :, self.off_cols, :])


class MLP(nn.Module):
    """``Linear -> tanh -> Linear``."""

    def __init__(self, d_in: int, width: int, dtype=torch.float64):
        super().__init__()
        self.fc1 = nn.Linear(d_in, width, dtype=dtype)
        self.fc2 = nn.Linear(width, width, dtype=dtype)

    def forward(self, h: Tensor) -> Tensor:
        return self.fc2(torch.tanh(self.fc1(h)))


class ConditionEmbedder(nn.Module):
    """Embeds ``(t, x)`` as ``tanh(concat(time_mlp(fourier(t)), data_mlp(x)))``.

    Without a time branch (discrete flow) only the data MLP is used.
    """

    def __init__(
        self,
        d_x: int,
        use_time: bool = True,
        fourier_features: int = 64,
        time_width: int = 64,
        data_width: int = 128,
        generator: torch.Generator | None = None,
        dtype=torch.float64,
    ):
        super().__init__()
        self.d_x = d_x
        self.use_time = use_time
        if use_time:
            self.fourier = FourierEmbedding(fourier_features, generator=generator)
            self.time_mlp = MLP(self.fourier.out_features, time_width, dtype=dtype)
        self.data_mlp = MLP(d_x, data_width, dtype=dtype)
        self.out_features = data_width + (time_width if use_time else 0)

    def forward(self, x: Tensor, t: Tensor | None = None) -> Tensor:
        if x.dim() != 2 or x.shape[1] != self.d_x:
            raise StructuralError(f"data must have shape (batch, {self.d_x}), got {tuple(x.shape)}")
        parts = []
        if self.use_time:
            if t is None:
                raise StructuralError("time input required")
            t = torch.as_tensor(t, dtype=x.dtype).reshape(-1)
            if t.numel() == 1:
                t = t.expand(x.shape[0])
            parts.append(self.time_mlp(self.fourier(t).to(x.dtype)))
        parts.append(self.data_mlp(x))
        return torch.tanh(torch.cat(parts, dim=-1))


def embed_condition(embedder: ConditionEmbedder, t, x: Tensor) -> Tensor:
    return embedder(x, t)


class Conditioning(nn.Module):
    """Adds ``Linear(c)`` to the hidden blocks of target dimensions only."""

    def __init__(self, c_features: int, d: int, width: int, target_dims: Sequence[bool], dtype=torch.float64):
        super().__init__()
        self.d, self.width = d, width
        self.proj = nn.Linear(c_features, d * width, dtype=dtype)
        self.register_buffer(
            "targets", torch.as_tensor(np.asarray(target_dims, dtype=bool)).reshape(1, d, 1)
        )

    def forward(self, h: Tensor, c: Tensor) -> Tensor:
        shift = self.proj(c).reshape(-1, self.d, self.width)
        return h + shift * self.targets.to(h.dtype)


def apply_conditioning(conditioning: Conditioning, h: Tensor, c: Tensor) -> Tensor:
    return conditioning(h, c)


class ConvexGate(nn.Module):
    """Trainable ``gamma = sigmoid(raw)`` mixing the identity and a network output."""

    def __init__(self, dtype=torch.float64):
        super().__init__()
        self.raw = nn.Parameter(torch.zeros((), dtype=dtype))

    @property
    def gamma(self) -> Tensor:
        return torch.sigmoid(self.raw)

    def forward(self, theta: Tensor, lam: Tensor) -> Tensor:
        g = self.gamma
        return g * theta + (1.0 - g) * lam


def convex_combine(gate: ConvexGate, theta: Tensor, lam: Tensor) -> Tensor:
    if theta.shape != lam.shape:
        raise StructuralError("convex combination needs equal shapes")
    return gate(theta, lam)


def gradient(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[Tensor]:
    """Reverse-mode gradient of a scalar loss with respect to ``params``.

    Parameters that do not influence the loss get a zero gradient.
    """
    loss = loss_fn()
    if loss.dim() != 0:
        raise StructuralError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

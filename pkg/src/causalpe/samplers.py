"""Posterior sampling: ODE integration from prior draws, flow inversion, rejection.

Every sampler draws ``theta0`` from the prior, maps it through the learned
transport, and keeps only samples with non-zero prior density. Proposals
continue until ``n`` samples are accepted or ``max_proposal_factor * n``
proposals have been made.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from causalpe.dcpeflow import invert
from causalpe.errors import InversionError, NumericalError

log = logging.getLogger(__name__)

Field = Callable[[Tensor, Tensor], Tensor]


@dataclass
class SampleSet:
    samples: np.ndarray
    proposed: int
    method: str = ""
    solver: str = ""
    seed: int = 0
    task: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def accepted(self) -> int:
        return int(self.samples.shape[0])

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0

    def __len__(self):
        return self.accepted

    def to_csv(self) -> str:
        d = self.samples.shape[1] if self.samples.ndim == 2 else 0
        lines = [",".join(f"theta{j + 1}" for j in range(d))]
        lines += [",".join(repr(float(v)) for v in row) for row in self.samples]
        return "\n".join(lines) + "\n"

    def sidecar(self) -> dict:
        return {
            "accepted": self.accepted,
            "proposed": self.proposed,
            "acceptance_rate": self.acceptance_rate,
            "method": self.method,
            "solver": self.solver,
            "seed": self.seed,
            "task": self.task,
            "meta": self.meta,
        }

    def save(self, csv_path, json_path, extra: dict | None = None) -> str:
        """Write samples and sidecar; returns the CSV's sha256."""
        text = self.to_csv()
        digest = hashlib.sha256(text.encode()).hexdigest()
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            fh.write(text)
        side = {**self.sidecar(), "samples_sha256": digest, **(extra or {})}
        with open(json_path, "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return digest

    @classmethod
    def load(cls, csv_path, json_path) -> "SampleSet":
        with open(json_path) as fh:
            side = json.load(fh)
        samples = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
        return cls(samples, int(side["proposed"]), side.get("method", ""), side.get("solver", ""),
                   int(side.get("seed", 0)), side.get("task", ""), side.get("meta", {}))


def rejection_filter(candidates, prior_logpdf, method="", solver="", seed=0, task="") -> SampleSet:
    """Drop rows outside the prior's support and record the acceptance rate."""
    candidates = np.asarray(candidates, dtype=float)
    keep = np.isfinite(np.asarray(prior_logpdf(candidates)))
    return SampleSet(candidates[keep], int(candidates.shape[0]), method, solver, seed, task)


@torch.no_grad()
def euler_integrate(field_fn: Field, z0: Tensor, n_steps: int = 20) -> Tensor:
    """Fixed-step Euler from t=0 to t=1, evaluating the field at left endpoints."""
    z = z0.clone()
    dt = 1.0 / n_steps
    for k in range(n_steps):
        t = torch.full((z.shape[0],), k * dt, dtype=z.dtype)
        z = z + dt * field_fn(t, z)
    return z


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
# fifth- minus fourth-order weights, last entry multiplies the FSAL stage
_E = (-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40)
_SAFETY, _MIN_FACTOR, _MAX_FACTOR = 0.9, 0.2, 10.0


def _rms(a: Tensor) -> Tensor:
    return a.pow(2).mean(dim=-1).sqrt()


def _initial_step(f, t, z, f0, rtol, atol):
    """Hairer-Norsett-Wanner starting step, per trajectory."""
    scale = atol + z.abs() * rtol
    d0, d1 = _rms(z / scale), _rms(f0 / scale)
    h0 = torch.where((d0 < 1e-5) | (d1 < 1e-5), torch.full_like(d0, 1e-6), 0.01 * d0 / d1)
    h0 = torch.minimum(h0, 1.0 - t)
    z1 = z + h0[:, None] * f0
    f1 = f(t + h0, z1)
    d2 = _rms((f1 - f0) / scale) / h0
    small = (d1 <= 1e-15) & (d2 <= 1e-15)
    h1 = torch.where(small, torch.maximum(torch.full_like(h0, 1e-6), h0 * 1e-3),
                     (0.01 / torch.maximum(d1, d2)) ** (1 / 5))
    return torch.minimum(torch.minimum(100 * h0, h1), 1.0 - t)


@torch.no_grad()
def dopri5_integrate(
    field_fn: Field,
    z0: Tensor,
    rtol: float = 1e-5,
    atol: float = 1e-6,
    max_steps: int = 10_000,
) -> tuple[Tensor, np.ndarray]:
    """Adaptive Dormand-Prince 5(4) from t=0 to t=1 with a step size per trajectory.

    Returns the end states and a boolean array flagging trajectories that
    finished; the others hit step-size underflow, the step budget, or
    non-finite states.
    """
    n = z0.shape[0]
    z = z0.clone()
    t = torch.zeros(n, dtype=z.dtype)
    ok = torch.ones(n, dtype=torch.bool)
    done = torch.zeros(n, dtype=torch.bool)
    k1 = field_fn(t, z).clone()
    h = _initial_step(field_fn, t, z, k1, rtol, atol)
    rejected = torch.zeros(n, dtype=torch.bool)
    eps = torch.finfo(z.dtype).eps
    for _ in range(max_steps):
        act = torch.nonzero(~done & ok).squeeze(-1)
        if act.numel() == 0:
            break
        ta, za, ha, k1a = t[act], z[act], h[act], k1[act]
        ha = torch.minimum(ha, 1.0 - ta)
        ks = [k1a]
        for s in range(1, 6):
            dz = sum(a * k for a, k in zip(_A[s], ks))
            ks.append(field_fn(ta + _C[s] * ha, za + ha[:, None] * dz))
        z_new = za + ha[:, None] * sum(b * k for b, k in zip(_B, ks))
        k7 = field_fn(ta + ha, z_new)
        ks.append(k7)
        err = ha[:, None] * sum(e * k for e, k in zip(_E, ks))
        scale = atol + torch.maximum(za.abs(), z_new.abs()) * rtol
        err_norm = _rms(err / scale)
        finite = torch.isfinite(z_new).all(-1) & torch.isfinite(err_norm)
        accept = (err_norm <= 1.0) & finite

        factor = torch.where(
            err_norm == 0, torch.full_like(err_norm, _MAX_FACTOR),
            (_SAFETY * err_norm.pow(-0.2)).clamp(_MIN_FACTOR, _MAX_FACTOR),
        )
        # no growth right after a rejection
        factor = torch.where(accept & rejected[act], factor.clamp(max=1.0), factor)
        factor = torch.where(finite, factor, torch.full_like(factor, _MIN_FACTOR))

        t_next = torch.where(accept, ta + ha, ta)
        t_next = torch.where(accept & (1.0 - t_next <= 10 * eps), torch.ones_like(t_next), t_next)
        t[act] = t_next
        z[act] = torch.where(accept[:, None], z_new, za)
        k1[act] = torch.where(accept[:, None], k7, k1a)
        h[act] = ha * factor
        rejected[act] = ~accept
        done[act] = t_next >= 1.0
        underflow = (~accept) & (h[act] < 10 * eps * torch.maximum(ta.abs(), torch.ones_like(ta)))
        ok[act] = ok[act] & ~underflow
    ok = ok & done
    if (~ok).any():
        log.debug("dopri5: %d of %d trajectories failed", int((~ok).sum()), n)
    return z, ok.numpy()


def _propose_until(n: int, propose, prior_logpdf, max_proposal_factor: float, rng, meta) -> tuple[np.ndarray, int]:
    cap = int(math.ceil(max_proposal_factor * n))
    kept, accepted, proposed = [], 0, 0
    while accepted < n:
        rate = accepted / proposed if proposed else 1.0
        m = int(math.ceil((n - accepted) / max(rate, 0.05)))
        m = min(m, cap - proposed)
        if m <= 0:
            raise NumericalError(
                f"only {accepted} of {n} samples accepted after {proposed} proposals"
            )
        candidates, finite = propose(rng, m)
        proposed += m
        meta["failed_trajectories"] = meta.get("failed_trajectories", 0) + int((~finite).sum())
        candidates = candidates[finite]
        lp = np.asarray(prior_logpdf(candidates))
        good = candidates[np.isfinite(lp)]
        kept.append(good)
        accepted += good.shape[0]
    samples = np.concatenate(kept)[:n]
    return samples, proposed


def _flow_sampler(estimator, x_obs, n, seed, method, solver, transport, max_proposal_factor):
    task = estimator.task
    xc = estimator.x_to_flow(x_obs)

    def propose(rng, m):
        theta0 = task.prior_sample(rng, m)
        z1, finite = transport(estimator.theta_to_flow(theta0), xc)
        theta1 = estimator.theta_from_flow(z1)
        finite = finite & np.isfinite(theta1).all(-1)
        return theta1, finite

    meta: dict = {}
    rng = np.random.default_rng(seed)
    samples, proposed = _propose_until(n, propose, task.prior_logpdf, max_proposal_factor, rng, meta)
    # the final batch may overshoot; only count proposals up to the n-th acceptance
    return SampleSet(samples, proposed, method, solver, seed, task.name, meta)


def _field(estimator, xc):
    net = estimator.net

    def f(t, z):
        return net(t, z, xc.expand(z.shape[0], -1))

    return f


def euler_sample(estimator, x_obs, n: int, T: int = 20, seed: int = 0, max_proposal_factor: float = 10.0) -> SampleSet:
    def transport(z0, xc):
        z1 = euler_integrate(_field(estimator, xc), z0, T)
        return z1, torch.isfinite(z1).all(-1).numpy()

    out = _flow_sampler(estimator, x_obs, n, seed, "cpe", f"euler{T}", transport, max_proposal_factor)
    out.meta["steps"] = T
    return out


def rk45_sample(estimator, x_obs, n: int, rtol: float = 1e-5, atol: float = 1e-6, seed: int = 0,
                max_proposal_factor: float = 10.0) -> SampleSet:
    def transport(z0, xc):
        return dopri5_integrate(_field(estimator, xc), z0, rtol=rtol, atol=atol)

    out = _flow_sampler(estimator, x_obs, n, seed, "cpe", "rk45", transport, max_proposal_factor)
    out.meta.update(rtol=rtol, atol=atol)
    return out


def discrete_sample(estimator, x_obs, n: int, seed: int = 0, tol: float = 1e-8,
                    max_proposal_factor: float = 10.0) -> SampleSet:
    """Push prior draws through the inverse of the discrete (normalizing) network."""
    net = estimator.net

    def transport(z0, xc):
        try:
            theta = invert(net, z0, xc, tol=tol)
            return theta, torch.isfinite(theta).all(-1).numpy()
        except InversionError:
            # fall back to one-by-one so a single bad draw does not sink the batch
            rows, finite = [], []
            for i in range(z0.shape[0]):
                try:
                    rows.append(invert(net, z0[i:i + 1], xc, tol=tol))
                    finite.append(True)
                except InversionError:
                    rows.append(torch.full_like(z0[i:i + 1], float("nan")))
                    finite.append(False)
            return torch.cat(rows), np.asarray(finite)

    return _flow_sampler(estimator, x_obs, n, seed, "cpe-discrete", "bisection", transport, max_proposal_factor)

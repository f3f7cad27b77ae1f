"""Simulation, standardization and training loops for both flow variants."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import Tensor

from causalpe.cpeflow import VectorFieldNet, interpolate
from causalpe.dcpeflow import ml_loss
from causalpe.errors import ArtifactError, NumericalError
from causalpe.estimator import Estimator, Standardizer
from causalpe.tasks import Task

log = logging.getLogger(__name__)

MAX_RESAMPLE_ROUNDS = 100


@dataclass
class Dataset:
    theta: np.ndarray
    x: np.ndarray
    task: str
    seed: int

    def __post_init__(self):
        if self.theta.shape[0] != self.x.shape[0]:
            raise ArtifactError("theta and x must have the same number of rows")

    def __len__(self):
        return self.theta.shape[0]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, theta=self.theta, x=self.x, task=np.array(self.task), seed=np.array(self.seed))

    @classmethod
    def load(cls, path) -> "Dataset":
        try:
            with np.load(path, allow_pickle=False) as z:
                return cls(z["theta"], z["x"], str(z["task"]), int(z["seed"]))
        except (OSError, KeyError, ValueError) as exc:
            raise ArtifactError(f"cannot read dataset {path}: {exc}") from exc


def simulate_dataset(task: Task, n: int, seed: int) -> Dataset:
    """Draw ``n`` pairs from the joint model; rows with non-finite output are redrawn."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    theta = task.prior_sample(rng, n)
    x = task.simulate(theta, rng)
    bad = ~np.isfinite(x).all(1)
    redrawn = 0
    for _ in range(MAX_RESAMPLE_ROUNDS):
        if not bad.any():
            break
        k = int(bad.sum())
        redrawn += k
        theta[bad] = task.prior_sample(rng, k)
        x[bad] = task.simulate(theta[bad], rng)
        bad = ~np.isfinite(x).all(1)
    if bad.any():
        raise NumericalError(f"simulator kept failing on {int(bad.sum())} rows")
    if redrawn:
        log.info("%s: resampled %d rows with non-finite simulator output", task.name, redrawn)
    return Dataset(theta, x, task.name, seed)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 2000
    val_frac: float = 0.1
    patience: int = 100

    def __post_init__(self):
        if not 0.0 < self.val_frac < 1.0:
            raise ValueError("val_frac must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def rectified_loss(net: VectorFieldNet, theta1: Tensor, x: Tensor, theta0: Tensor, t: Tensor) -> Tensor:
    """``mean ||(theta1 - theta0) - v_t(theta_t, x)||^2`` on the straight path."""
    if theta1.shape[0] == 0:
        raise ValueError("empty batch")
    theta_t = interpolate(theta0, theta1, t)
    resid = (theta1 - theta0) - net(t, theta_t, x)
    loss = resid.pow(2).sum(-1).mean()
    if not torch.isfinite(loss):
        raise NumericalError("non-finite rectified loss")
    return loss


class MaskedAdam:
    """``torch.optim.Adam`` that re-zeroes masked entries after every update.

    ``masks`` holds one 0/1 tensor (or ``None``) per parameter, so forbidden
    entries stay exactly zero even if a gradient leaks into them.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, masks=None):
        self.params = list(params)
        self.masks = list(masks) if masks is not None else [None] * len(self.params)
        self.opt = torch.optim.Adam(self.params, lr=lr, betas=tuple(betas), eps=eps)

    @property
    def step_count(self) -> int:
        states = [self.opt.state[p] for p in self.params if p in self.opt.state]
        return int(states[0]["step"]) if states else 0

    @torch.no_grad()
    def step(self, grads) -> None:
        for p, g in zip(self.params, grads):
            p.grad = torch.zeros_like(p) if g is None else g.detach().clone()
        self.opt.step()
        for p, mask in zip(self.params, self.masks):
            if mask is not None:
                p.mul_(mask)
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return self.opt.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.opt.load_state_dict(state)


def optimizer_step(params, grads, state: MaskedAdam) -> MaskedAdam:
    """Apply one Adam update in place and return the optimizer state."""
    if len(list(params)) != len(state.params):
        raise ValueError("parameter list does not match optimizer state")
    state.step(grads)
    return state


@dataclass
class History:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = 0
    stopped_early: bool = False

    def append(self, epoch, train, val):
        self.epochs.append(epoch)
        self.train_loss.append(train)
        self.val_loss.append(val)

    def __len__(self):
        return len(self.epochs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in zip(self.epochs, self.train_loss, self.val_loss):
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])
        return buf.getvalue()


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, history: History):
        super().__init__(message)
        self.history = history


def _split(n: int, val_frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(val_frac * n))), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class _Objective:
    """Batched loss for either variant, in flow coordinates."""

    def __init__(self, est: Estimator):
        self.est = est
        self.continuous = isinstance(est.net, VectorFieldNet)

    def extras(self, n: int, rng: np.random.Generator):
        """Per-row randomness of the rectified objective: ``(theta0, t)``."""
        if not self.continuous:
            return None
        est = self.est
        theta0 = est.theta_to_flow(est.task.prior_sample(rng, n))
        t = torch.as_tensor(rng.random(n), dtype=est.dtype)
        return theta0, t

    def __call__(self, theta, x, extras) -> Tensor:
        net = self.est.net
        if self.continuous:
            theta0, t = extras
            return rectified_loss(net, theta, x, theta0, t)
        return ml_loss(net, theta, x, self.est.base_logpdf_flow)


def train(
    est: Estimator,
    dataset: Dataset,
    config: TrainConfig | None = None,
    seed: int = 0,
) -> History:
    """Fit ``est.net`` in place and restore the parameters with the lowest validation loss.

    The standardizer of ``est`` should already be fitted on the training split
    (see :func:`fit_estimator`).
    """
    cfg = config or TrainConfig()
    rng = np.random.default_rng(seed)
    net = est.net
    obj = _Objective(est)
    n = len(dataset)
    train_idx, val_idx = _split(n, cfg.val_frac, np.random.default_rng([seed, 1]))
    theta = est.theta_to_flow(dataset.theta)
    x = est.x_to_flow(dataset.x)
    theta_val, x_val = theta[val_idx], x[val_idx]
    # fixed validation randomness keeps the validation curve comparable across epochs
    val_extras = obj.extras(len(val_idx), np.random.default_rng([seed, 2]))

    params = [p for p in net.parameters() if p.requires_grad]
    opt = MaskedAdam(params, cfg.lr, cfg.betas, cfg.eps)
    history = History()

    def validate() -> float:
        with torch.no_grad():
            return float(obj(theta_val, x_val, val_extras))

    try:
        best_val = validate()
    except NumericalError as exc:
        raise TrainingDiverged(f"initial validation: {exc}", history) from exc
    best_state = copy.deepcopy(net.state_dict())
    history.initial_val_loss = best_val
    if not math.isfinite(best_val):
        raise TrainingDiverged("initial validation loss is not finite", history)
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = train_idx[rng.permutation(train_idx.size)]
        total, count = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            extras = obj.extras(idx.numel(), rng)
            try:
                loss = obj(theta[idx], x[idx], extras)
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            opt.step(grads)
            total += loss.item() * idx.numel()
            count += idx.numel()
        try:
            val = validate()
        except NumericalError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
        history.append(epoch, total / count, val)
        if not math.isfinite(val):
            raise TrainingDiverged(f"validation loss diverged at epoch {epoch}", history)
        if val < best_val:
            best_val, since_best = val, 0
            best_state = copy.deepcopy(net.state_dict())
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                history.stopped_early = True
                break
    net.load_state_dict(best_state)
    log.info("trained %d epochs, best epoch %d (val %.5g)", len(history), history.best_epoch, best_val)
    return history


def fit_estimator(task: Task, net, dataset: Dataset, config: TrainConfig | None = None,
                  seed: int = 0) -> tuple[Estimator, History]:
    """Fit the standardizer on the training split, then train."""
    cfg = config or TrainConfig()
    train_idx, _ = _split(len(dataset), cfg.val_frac, np.random.default_rng([seed, 1]))
    std = Standardizer.fit(dataset.theta[train_idx], dataset.x[train_idx])
    est = Estimator(task, net, std)
    return est, train(est, dataset, cfg, seed)

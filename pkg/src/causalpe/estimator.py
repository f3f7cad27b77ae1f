"""Glue between a task (natural layout, original scale) and a flow network.

Networks see standardized parameters in topological layout and standardized
data. :class:`Estimator` owns that mapping so trainers and samplers can stay
agnostic of the task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from causalpe.cpeflow import CpeConfig, VectorFieldNet
from causalpe.dcpeflow import DiscreteFlowNet
from causalpe.errors import StructuralError
from causalpe.graph import TopologicalOrder, dependency_mask, invert_program, layout_permutation, topological_sort
from causalpe.tasks import Task

STD_FLOOR = 1e-8
VARIANTS = ("continuous", "discrete")


@dataclass
class Standardizer:
    theta_mean: np.ndarray
    theta_std: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray

    @classmethod
    def fit(cls, theta: np.ndarray, x: np.ndarray) -> "Standardizer":
        return cls(
            theta.mean(0),
            np.maximum(theta.std(0), STD_FLOOR),
            x.mean(0),
            np.maximum(x.std(0), STD_FLOOR),
        )

    @classmethod
    def identity(cls, d_theta: int, d_x: int) -> "Standardizer":
        return cls(np.zeros(d_theta), np.ones(d_theta), np.zeros(d_x), np.ones(d_x))

    def transform_theta(self, theta):
        return (theta - self.theta_mean) / self.theta_std

    def inverse_theta(self, z):
        return z * self.theta_std + self.theta_mean

    def transform_x(self, x):
        return (x - self.x_mean) / self.x_std

    def inverse_x(self, z):
        return z * self.x_std + self.x_mean

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Standardizer":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in doc.items()})


def build_mask(task: Task, condition_all: bool = False):
    posterior = invert_program(task.dag)
    return dependency_mask(posterior, topological_sort(posterior), condition_all=condition_all)


def build_net(task: Task, variant: str, config: CpeConfig, seed: int, condition_all: bool = False):
    mask = build_mask(task, condition_all)
    if variant == "continuous":
        return VectorFieldNet(mask, task.dim_x, config, seed=seed)
    if variant == "discrete":
        return DiscreteFlowNet(mask, task.dim_x, config, seed=seed)
    raise StructuralError(f"unknown variant {variant!r}")


class Estimator:
    """A flow network together with the task's prior and the data preprocessing."""

    def __init__(self, task: Task, net, standardizer: Standardizer):
        self.task = task
        self.net = net
        self.standardizer = standardizer
        self.variant = "discrete" if isinstance(net, DiscreteFlowNet) else "continuous"
        self.perm = layout_permutation(task.parameter_nodes, TopologicalOrder(net.mask.order))
        self.inverse_perm = np.argsort(self.perm)
        self._theta_std_log_sum = float(np.log(standardizer.theta_std).sum())

    @property
    def dtype(self) -> torch.dtype:
        return self.net.dtype

    def theta_to_flow(self, theta) -> Tensor:
        theta = np.asarray(theta, dtype=float).reshape(-1, self.task.dim_theta)
        z = self.standardizer.transform_theta(theta)[:, self.perm]
        return torch.as_tensor(z, dtype=self.dtype)

    def theta_from_flow(self, z: Tensor) -> np.ndarray:
        z = z.detach().cpu().numpy().astype(float)[:, self.inverse_perm]
        return self.standardizer.inverse_theta(z)

    def x_to_flow(self, x) -> Tensor:
        x = np.asarray(x, dtype=float).reshape(-1, self.task.dim_x)
        return torch.as_tensor(self.standardizer.transform_x(x), dtype=self.dtype)

    def base_logpdf_flow(self, z: Tensor) -> Tensor:
        """Prior log-density of standardized, topologically laid-out parameters (torch)."""
        s = self.standardizer
        inv = torch.as_tensor(self.inverse_perm)
        theta = z[:, inv] * torch.as_tensor(s.theta_std, dtype=z.dtype) + torch.as_tensor(s.theta_mean, dtype=z.dtype)
        return self.task.prior_logpdf(theta) + self._theta_std_log_sum

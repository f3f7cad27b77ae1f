"""Posterior comparison: classifier two-sample test, moment errors, cluster statistic."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.model_selection import StratifiedKFold
from sklearn.neural_network import MLPClassifier

from causalpe.errors import StructuralError
from causalpe.samplers import SampleSet

MIN_C2ST_SAMPLES = 500


@dataclass
class C2stConfig:
    hidden: tuple[int, ...] = (64, 64)
    folds: int = 5
    lr: float = 1e-4
    max_epochs: int = 200
    patience: int = 20
    batch_size: int = 128

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be at least 2")


def _samples(a) -> np.ndarray:
    return np.asarray(a.samples if isinstance(a, SampleSet) else a, dtype=float)


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise StructuralError(f"sample sets must be 2-D with equal widths, got {a.shape} and {b.shape}")


def c2st(a, b, config: C2stConfig | None = None, seed: int = 0) -> float:
    """Cross-validated accuracy of an MLP separating ``a`` from ``b``.

    The larger set is subsampled so classes balance, and both sets are
    standardized with their pooled statistics. Reports ``max(acc, 1 - acc)``.
    """
    cfg = config or C2stConfig()
    a, b = _samples(a), _samples(b)
    _check_dims(a, b)
    n = min(a.shape[0], b.shape[0])
    if n < MIN_C2ST_SAMPLES:
        raise ValueError(f"c2st needs at least {MIN_C2ST_SAMPLES} samples per set, got {n}")
    rng = np.random.default_rng(seed)
    a = a[np.sort(rng.choice(a.shape[0], n, replace=False))]
    b = b[np.sort(rng.choice(b.shape[0], n, replace=False))]
    data = np.concatenate([a, b])
    labels = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    std = data.std(0)
    data = (data - data.mean(0)) / np.where(std > 0, std, 1.0)

    folds = StratifiedKFold(cfg.folds, shuffle=True, random_state=seed)
    scores = []
    for k, (tr, te) in enumerate(folds.split(data, labels)):
        clf = MLPClassifier(
            hidden_layer_sizes=cfg.hidden,
            solver="adam",
            learning_rate_init=cfg.lr,
            batch_size=cfg.batch_size,
            max_iter=cfg.max_epochs,
            early_stopping=True,
            n_iter_no_change=cfg.patience,
            random_state=seed + k,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            clf.fit(data[tr], labels[tr])
        scores.append(clf.score(data[te], labels[te]))
    acc = float(np.mean(scores))
    return max(acc, 1.0 - acc)


def moment_report(a, b) -> tuple[float, float]:
    """``(||mean(a) - mean(b)||_2, ||cov(a) - cov(b)||_F)``."""
    a, b = _samples(a), _samples(b)
    _check_dims(a, b)
    mean_err = float(np.linalg.norm(a.mean(0) - b.mean(0)))
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    return mean_err, float(np.linalg.norm(cov_a - cov_b))


def two_cluster_ratio(samples, seed: int = 0) -> float:
    """Inertia of a 1-means fit divided by that of a 2-means fit."""
    s = _samples(samples)
    one = ((s - s.mean(0)) ** 2).sum()
    two = KMeans(n_clusters=2, n_init=10, random_state=seed).fit(s).inertia_
    return float(one / two) if two > 0 else float("inf")


def is_bimodal(samples, threshold: float = 1.5, seed: int = 0) -> bool:
    return two_cluster_ratio(samples, seed) > threshold


REPORT_FIELDS = ("task", "method", "solver", "n_train", "seed", "c2st", "mean_error",
                 "cov_error", "acceptance_rate", "config_hash")


@dataclass
class EvalReport:
    task: str
    method: str
    n_train: int
    c2st: float
    mean_error: float
    cov_error: float
    acceptance_rate: float
    seed: int
    solver: str = ""
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self) -> list:
        d = self.to_dict()
        return [repr(v) if isinstance(v, float) else v for v in (d[k] for k in REPORT_FIELDS)]

    @staticmethod
    def csv_table(reports) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow(r.csv_row())
        return buf.getvalue()


def evaluate(samples: SampleSet, reference, n_train: int, seed: int = 0, config: C2stConfig | None = None,
             config_hash: str = "") -> EvalReport:
    mean_err, cov_err = moment_report(samples, reference)
    return EvalReport(
        task=samples.task,
        method=samples.method,
        n_train=n_train,
        c2st=c2st(samples, reference, config, seed),
        mean_error=mean_err,
        cov_error=cov_err,
        acceptance_rate=samples.acceptance_rate,
        seed=seed,
        solver=samples.solver,
        config_hash=config_hash,
    )

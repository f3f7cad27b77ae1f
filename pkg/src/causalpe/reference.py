"""Reference posteriors by hit-and-run slice sampling.

Chains advance in lockstep so each log-density call is vectorized over
chains. During warmup the direction distribution is shaped by the pooled
covariance of all chains' states; it is frozen afterwards so the retained
draws come from a fixed Markov kernel.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from causalpe.errors import NumericalError
from causalpe.samplers import SampleSet
from causalpe.tasks import Task

log = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.05


@dataclass
class ReferenceConfig:
    chains: int = 4
    samples: int = 5000  # iterations per chain, warmup included
    warmup: int = 2500
    thin: int = 2
    width: float = 2.0
    max_step_out: int = 50
    n_init: int = 10_000
    init_retries: int = 10

    def __post_init__(self):
        if not 0 <= self.warmup < self.samples:
            raise ValueError("warmup must be non-negative and smaller than samples")
        if self.chains < 1 or self.thin < 1:
            raise ValueError("chains and thin must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _rhat_basic(chains: np.ndarray) -> float:
    m, n = chains.shape
    means = chains.mean(1)
    b = n * means.var(ddof=1)
    w = chains.var(1, ddof=1).mean()
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _rank_normalize(a: np.ndarray) -> np.ndarray:
    s = a.size
    r = rankdata(a, method="average").reshape(a.shape)
    return ndtri((r - 0.375) / (s + 0.25))


def split_rhat(draws: np.ndarray) -> np.ndarray:
    """Rank-normalized split R-hat per dimension; ``draws`` is (chains, n, d).

    Takes the max of the bulk and folded (tail) statistics.
    """
    draws = np.asarray(draws, dtype=float)
    m, n, d = draws.shape
    half = n // 2
    split = np.concatenate([draws[:, :half], draws[:, n - half:]], axis=0)
    out = np.empty(d)
    for j in range(d):
        x = split[:, :, j]
        bulk = _rhat_basic(_rank_normalize(x))
        folded = _rhat_basic(_rank_normalize(np.abs(x - np.median(x))))
        out[j] = max(bulk, folded)
    return out


def _initial_states(task, logp, rng, cfg):
    for _ in range(cfg.init_retries):
        cand = task.prior_sample(rng, cfg.n_init)
        lp = logp(cand)
        finite = np.isfinite(lp)
        if finite.sum() >= 2:
            cand, lp = cand[finite], lp[finite]
            top = np.argsort(-lp, kind="stable")[: max(cfg.chains, min(100, lp.size))]
            pick = rng.choice(top, size=cfg.chains, replace=top.size < cfg.chains)
            scale = np.atleast_2d(np.cov(cand[top], rowvar=False))
            return cand[pick], lp[pick], scale
    raise NumericalError("could not find a starting point with non-zero posterior density")


def _chol(cov: np.ndarray) -> np.ndarray:
    d = cov.shape[0]
    jitter = 1e-9 * max(np.trace(cov) / d, 1e-12)
    for _ in range(10):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            jitter *= 10
    return np.diag(np.sqrt(np.maximum(np.diag(cov), 1e-12)))


def slice_sample_reference(task: Task, x_obs, config: ReferenceConfig | None = None, seed: int = 0) -> SampleSet:
    cfg = config or ReferenceConfig()
    rng = np.random.default_rng(seed)
    x_obs = np.asarray(x_obs, dtype=float)

    def logp(theta):
        return task.log_posterior_unnorm(theta, x_obs)

    state, lp, scale = _initial_states(task, logp, rng, cfg)
    c, d = state.shape
    chol = _chol(scale)
    kept = []
    warm_states = []
    for it in range(cfg.samples):
        z = rng.normal(size=(c, d))
        direction = (z / np.linalg.norm(z, axis=1, keepdims=True)) @ chol.T
        log_y = lp - rng.exponential(size=c)

        def along(s):
            return logp(state + s[:, None] * direction)

        lo = -cfg.width * rng.random(c)
        hi = lo + cfg.width
        for _ in range(cfg.max_step_out):
            grow = along(lo) > log_y
            if not grow.any():
                break
            lo = np.where(grow, lo - cfg.width, lo)
        for _ in range(cfg.max_step_out):
            grow = along(hi) > log_y
            if not grow.any():
                break
            hi = np.where(grow, hi + cfg.width, hi)

        pending = np.ones(c, dtype=bool)
        step = np.zeros(c)
        new_lp = lp.copy()
        while pending.any():
            s = lo + (hi - lo) * rng.random(c)
            lps = along(np.where(pending, s, 0.0))
            hit = pending & (lps > log_y)
            step[hit], new_lp[hit] = s[hit], lps[hit]
            miss = pending & ~hit
            lo = np.where(miss & (s < 0), s, lo)
            hi = np.where(miss & (s >= 0), s, hi)
            pending = miss
        state = state + step[:, None] * direction
        lp = new_lp

        if it < cfg.warmup:
            warm_states.append(state.copy())
            if it >= 100 and (it + 1) % 100 == 0:
                pooled = np.concatenate(warm_states[len(warm_states) // 2:])
                chol = _chol(np.atleast_2d(np.cov(pooled, rowvar=False)))
        elif (it - cfg.warmup) % cfg.thin == 0:
            kept.append(state.copy())

    draws = np.stack(kept, axis=1)  # (chains, n, d)
    rhat = split_rhat(draws)
    meta = {"rhat": rhat.tolist(), "config": cfg.to_dict()}
    if (rhat > RHAT_THRESHOLD).any():
        meta["warning"] = f"split R-hat above {RHAT_THRESHOLD}: max {rhat.max():.3f}"
        log.warning("%s reference: %s", task.name, meta["warning"])
    samples = draws.reshape(-1, d)
    return SampleSet(samples, samples.shape[0], "reference", "slice", seed, task.name, meta)

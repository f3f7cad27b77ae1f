"""Command-line pipeline: simulate, train, sample, reference, evaluate, benchmark.

Settings come from defaults, then an optional JSON file (``--config``), then
command-line flags. Outputs live under ``--output-dir``, the
``CPE_OUTPUT_ROOT`` environment variable, or ``./cpe-output``, in the layout::

    <root>/<task>/seed<s>/observation.json
    <root>/<task>/seed<s>/reference.{csv,json}
    <root>/<task>/seed<s>/n<N>/dataset.npz
    <root>/<task>/seed<s>/n<N>/<variant>/{checkpoint.cpe,history.csv,train.json}
    <root>/<task>/seed<s>/n<N>/<variant>/samples_<solver>.{csv,json}
    <root>/<task>/seed<s>/n<N>/<variant>/eval_<solver>.json
    <root>/results.csv, <root>/summary.csv
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from causalpe.cpeflow import CpeConfig
from causalpe.errors import ArtifactError, ConfigError, NumericalError, StructuralError
from causalpe.evaluation import C2stConfig, EvalReport, evaluate
from causalpe.estimator import build_net
from causalpe.reference import ReferenceConfig, slice_sample_reference
from causalpe.samplers import SampleSet, discrete_sample, euler_sample, rk45_sample
from causalpe.serialization import config_hash, load_checkpoint, save_checkpoint, sha256_hex
from causalpe.tasks import TASKS, LinearGaussian, analytic_posterior, make_task
from causalpe.train import Dataset, TrainConfig, fit_estimator, simulate_dataset

log = logging.getLogger("causalpe")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4
ENV_OUTPUT_ROOT = "CPE_OUTPUT_ROOT"
VARIANTS = ("continuous", "discrete")
SOLVERS = ("euler", "rk45")


@dataclass
class RunConfig:
    task: str = "linear_gaussian"
    n_train: int = 10000
    variant: str = "continuous"
    solver: str = "euler"
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = ""
    n_samples: int = 5000
    euler_steps: int = 20
    rtol: float = 1e-5
    atol: float = 1e-6
    condition_all: bool = False
    threads: int = 1
    workers: int = 1
    tasks: list = field(default_factory=list)  # benchmark grid; empty means [task]
    train: TrainConfig = field(default_factory=TrainConfig)
    net: CpeConfig = field(default_factory=CpeConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    c2st: C2stConfig = field(default_factory=C2stConfig)

    # fields that only say where or how fast to run, not what to compute
    _NOT_HASHED = ("output_dir", "threads", "workers", "seeds", "tasks")

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; available: {', '.join(sorted(TASKS))}")
        for t in self.tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r} in benchmark grid")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}")
        if self.n_train < 10 or self.n_samples < 1 or self.euler_steps < 1:
            raise ConfigError("n_train must be >= 10, n_samples and euler_steps >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if hasattr(v, "to_dict") else (dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v)
        return d

    def hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in self._NOT_HASHED}
        return config_hash(d)

    def root(self) -> Path:
        return Path(self.output_dir or os.environ.get(ENV_OUTPUT_ROOT) or "cpe-output")


_NESTED = {"train": TrainConfig, "net": CpeConfig, "reference": ReferenceConfig, "c2st": C2stConfig}


def _build_nested(cls, doc: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    if cls is C2stConfig and "hidden" in doc:
        doc = {**doc, "hidden": tuple(doc["hidden"])}
    try:
        return cls(**doc)
    except (ValueError, StructuralError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """defaults < JSON file < flags; nested sections merge key by key."""
    doc: dict = {}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must contain a JSON object")
    merged = dict(doc)
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section, sub = key.split(".", 1)
            merged.setdefault(section, {})
            merged[section] = {**merged[section], sub: value}
        else:
            merged[key] = value
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(merged) - top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in merged.items():
        if key in _NESTED:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            kwargs[key] = _build_nested(_NESTED[key], value)
        else:
            kwargs[key] = value
    if merged.get("variant") == "discrete" and "dtype" not in merged.get("net", {}):
        # bisection inversion needs double precision to hit its residual tolerance
        net_doc = dataclasses.asdict(kwargs["net"]) if "net" in kwargs else {}
        kwargs["net"] = CpeConfig(**{**net_doc, "dtype": "float64"})
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.seeds = [int(s) for s in (cfg.seeds if isinstance(cfg.seeds, list) else [cfg.seeds])]
    cfg.validate()
    return cfg


# paths ------------------------------------------------------------------

def seed_dir(cfg: RunConfig, task: str, seed: int) -> Path:
    return cfg.root() / task / f"seed{seed}"


def run_dir(cfg: RunConfig, task: str, seed: int) -> Path:
    return seed_dir(cfg, task, seed) / f"n{cfg.n_train}"


def model_dir(cfg: RunConfig, task: str, seed: int) -> Path:
    return run_dir(cfg, task, seed) / cfg.variant


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing {path}; run `cpe {hint}` first")
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _file_sha(path: Path) -> str:
    return sha256_hex(path.read_bytes())


# stages -----------------------------------------------------------------

def observation(cfg: RunConfig, task_name: str, seed: int) -> np.ndarray:
    path = seed_dir(cfg, task_name, seed) / "observation.json"
    if path.exists():
        try:
            return np.asarray(json.loads(path.read_text())["x_obs"], dtype=float)
        except (json.JSONDecodeError, KeyError) as exc:
            raise ArtifactError(f"corrupted observation file {path}: {exc}") from exc
    task = make_task(task_name)
    theta, x = task.generate_observation(np.random.default_rng([seed, 7]))
    _write_json(path, {
        "task": task_name,
        "seed": seed,
        "theta_star": None if theta is None else np.asarray(theta).tolist(),
        "x_obs": np.asarray(x).tolist(),
    })
    return x


def cmd_simulate(cfg: RunConfig, task_name: str, seed: int) -> Path:
    out = run_dir(cfg, task_name, seed) / "dataset.npz"
    meta = out.with_suffix(".json")
    if out.exists() and meta.exists():
        return out
    ds = simulate_dataset(make_task(task_name), cfg.n_train, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    _write_json(meta, {"task": task_name, "seed": seed, "rows": len(ds), "sha256": _file_sha(out)})
    observation(cfg, task_name, seed)
    return out


def cmd_train(cfg: RunConfig, task_name: str, seed: int, force: bool = False) -> Path:
    mdir = model_dir(cfg, task_name, seed)
    ckpt = mdir / "checkpoint.cpe"
    chash = cfg.hash()
    if ckpt.exists() and not force:
        _, header = load_checkpoint(ckpt)
        if header.get("config_hash") == chash:
            log.info("checkpoint %s is up to date", ckpt)
            return ckpt
    ds = Dataset.load(_require(run_dir(cfg, task_name, seed) / "dataset.npz", "simulate"))
    task = make_task(task_name)
    if ds.task != task_name:
        raise ArtifactError(f"dataset was simulated for task {ds.task!r}, not {task_name!r}")
    net = build_net(task, cfg.variant, cfg.net, seed, cfg.condition_all)
    est, history = fit_estimator(task, net, ds, cfg.train, seed)
    mdir.mkdir(parents=True, exist_ok=True)
    (mdir / "history.csv").write_text(history.to_csv())
    digest = save_checkpoint(ckpt, est, seed=seed, run_config_hash=chash, condition_all=cfg.condition_all)
    _write_json(mdir / "train.json", {
        "config_hash": chash,
        "seed": seed,
        "epochs": len(history),
        "best_epoch": history.best_epoch,
        "initial_val_loss": history.initial_val_loss,
        "best_val_loss": min([history.initial_val_loss, *history.val_loss]),
        "stopped_early": history.stopped_early,
        "checkpoint_sha256": digest,
        "history_sha256": _file_sha(mdir / "history.csv"),
    })
    return ckpt


def _sample_paths(cfg: RunConfig, task_name: str, seed: int) -> tuple[Path, Path]:
    solver = "bisection" if cfg.variant == "discrete" else cfg.solver
    base = model_dir(cfg, task_name, seed) / f"samples_{solver}"
    return base.with_suffix(".csv"), base.with_suffix(".json")


def cmd_sample(cfg: RunConfig, task_name: str, seed: int) -> Path:
    est, header = load_checkpoint(_require(model_dir(cfg, task_name, seed) / "checkpoint.cpe", "train"))
    x_obs = observation(cfg, task_name, seed)
    if est.variant == "discrete":
        s = discrete_sample(est, x_obs, cfg.n_samples, seed=seed)
    elif cfg.solver == "euler":
        s = euler_sample(est, x_obs, cfg.n_samples, T=cfg.euler_steps, seed=seed)
    else:
        s = rk45_sample(est, x_obs, cfg.n_samples, rtol=cfg.rtol, atol=cfg.atol, seed=seed)
    csv_path, json_path = _sample_paths(cfg, task_name, seed)
    s.save(csv_path, json_path, {"config_hash": cfg.hash(), "checkpoint_sha256": header["payload_sha256"]})
    return csv_path


def cmd_reference(cfg: RunConfig, task_name: str, seed: int) -> Path:
    sdir = seed_dir(cfg, task_name, seed)
    csv_path, json_path = sdir / "reference.csv", sdir / "reference.json"
    task = make_task(task_name)
    x_obs = observation(cfg, task_name, seed)
    n = cfg.reference.chains * len(range(cfg.reference.warmup, cfg.reference.samples, cfg.reference.thin))
    if isinstance(task, LinearGaussian):
        mean, cov = analytic_posterior(task, x_obs)
        draws = np.random.default_rng([seed, 11]).multivariate_normal(mean, cov, size=n, method="cholesky")
        ref = SampleSet(draws, n, "reference", "analytic", seed, task_name)
    else:
        ref = slice_sample_reference(task, x_obs, cfg.reference, seed)
    ref_hash = config_hash({"reference": cfg.reference.to_dict(), "task": task_name})
    ref.save(csv_path, json_path, {"config_hash": ref_hash})
    return csv_path


def cmd_evaluate(cfg: RunConfig, task_name: str, seed: int, tables: bool = True) -> Path:
    sdir = seed_dir(cfg, task_name, seed)
    csv_path, json_path = _sample_paths(cfg, task_name, seed)
    samples = SampleSet.load(_require(csv_path, "sample"), _require(json_path, "sample"))
    ref = SampleSet.load(_require(sdir / "reference.csv", "reference"), _require(sdir / "reference.json", "reference"))
    report = evaluate(samples, ref, cfg.n_train, seed=seed, config=cfg.c2st, config_hash=cfg.hash())
    report.extra = {
        "samples_sha256": _file_sha(csv_path),
        "reference_sha256": _file_sha(sdir / "reference.csv"),
    }
    out = model_dir(cfg, task_name, seed) / f"eval_{samples.solver}.json"
    _write_json(out, report.to_dict())
    if tables:
        write_tables(cfg.root())
    return out


def _collect_reports(root: Path) -> list[EvalReport]:
    reports = []
    for path in sorted(root.glob("*/seed*/n*/*/eval_*.json")):
        doc = json.loads(path.read_text())
        reports.append(EvalReport(**doc))
    reports.sort(key=lambda r: (r.task, r.method, r.solver, r.n_train, r.seed))
    return reports


def write_tables(root: Path) -> None:
    """Rebuild results.csv (one row per run) and summary.csv (seed means) from eval JSONs."""
    reports = _collect_reports(root)
    (root / "results.csv").write_text(EvalReport.csv_table(reports))
    groups: dict = {}
    for r in reports:
        groups.setdefault((r.task, r.method, r.solver, r.n_train), []).append(r)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "method", "solver", "n_train", "metric", "mean", "std", "n_seeds"])
    for key in sorted(groups):
        for metric in ("c2st", "mean_error", "cov_error", "acceptance_rate"):
            vals = np.array([getattr(r, metric) for r in groups[key]])
            w.writerow([*key, metric, repr(float(vals.mean())), repr(float(vals.std())), len(vals)])
    (root / "summary.csv").write_text(buf.getvalue())


STAGES = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "sample": cmd_sample,
    "reference": cmd_reference,
    "evaluate": cmd_evaluate,
}


def _pipeline_job(args) -> str:
    cfg_doc, task_name, seed = args
    cfg = load_config(None, _flatten(cfg_doc))
    _configure_torch(cfg)
    for name in ("simulate", "train", "sample", "reference"):
        STAGES[name](cfg, task_name, seed)
    # summary tables are rebuilt once by the parent, not concurrently by workers
    return str(cmd_evaluate(cfg, task_name, seed, tables=False))


def cmd_benchmark(cfg: RunConfig) -> list[str]:
    """Run the full pipeline for every (task, seed); jobs may run in parallel processes."""
    tasks = cfg.tasks or [cfg.task]
    doc = cfg.to_dict()
    jobs = [(doc, t, s) for t in tasks for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            outs = list(pool.map(_pipeline_job, jobs))
    else:
        outs = [_pipeline_job(j) for j in jobs]
    write_tables(cfg.root())
    return outs


def _flatten(doc: dict) -> dict:
    flat = {}
    for k, v in doc.items():
        if isinstance(v, dict):
            for sk, sv in v.items():
                flat[f"{k}.{sk}"] = sv
        else:
            flat[k] = v
    return flat


def _configure_torch(cfg: RunConfig) -> None:
    torch.set_num_threads(max(1, int(cfg.threads)))


# argument parsing -------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--task")
    common.add_argument("--n-train", dest="n_train", type=int)
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--solver", choices=SOLVERS)
    common.add_argument("--seeds", type=int, nargs="+")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--n-samples", dest="n_samples", type=int)
    common.add_argument("--euler-steps", dest="euler_steps", type=int)
    common.add_argument("--max-epochs", dest="train.max_epochs", type=int)
    common.add_argument("--batch-size", dest="train.batch_size", type=int)
    common.add_argument("--lr", dest="train.lr", type=float)
    common.add_argument("--patience", dest="train.patience", type=int)
    common.add_argument("--block-size", dest="net.block_size", type=int)
    common.add_argument("--dtype", dest="net.dtype", choices=("float32", "float64"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cpe", description="Causal posterior estimation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "sample", "reference", "evaluate"):
        sub.add_parser(name, parents=[common])
    train = sub.add_parser("train", parents=[common])
    train.add_argument("--force", action="store_true", help="retrain even if an up-to-date checkpoint exists")
    bench = sub.add_parser("benchmark", parents=[common])
    bench.add_argument("--tasks", nargs="+")
    bench.add_argument("--workers", type=int)
    return parser


_NON_CONFIG = {"config", "command", "verbose", "force"}


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    try:
        cfg = load_config(args.config, overrides)
        _configure_torch(cfg)
        if args.command == "benchmark":
            for out in cmd_benchmark(cfg):
                print(out)
            return EXIT_OK
        for seed in cfg.seeds:
            if args.command == "train":
                out = cmd_train(cfg, cfg.task, seed, force=args.force)
            else:
                out = STAGES[args.command](cfg, cfg.task, seed)
            print(out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, FileNotFoundError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Experiment configs (TOML) and per-seed run orchestration.

Config schema (unknown keys anywhere are errors)::

    method = "almost_right"      # baseline_ce | almost_right | hard_ortho
                                 # | lsuv_init | lsuv_plus_almost_right
    seeds = [0, 1, 2, 3, 4]
    output_dir = "runs/demo"
    precision = "float64"        # or "float32"
    tau_deg = 10.0

    [task]                       # kind = "synthetic" takes TaskConfig fields
    kind = "synthetic"
    seed = 2024
    # kind = "idx": train_images, train_labels, test_images, test_labels,
    #               val_fraction, split_seed

    [loss]                       # alpha, epsilon, first_activation
    [sgd]                        # lr0, decay_factor, decay_every, batch_size, epochs
    [lsuv]                       # tol_var, max_iters
    [model]                      # k1, k2
"""

from __future__ import annotations

import copy
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .data import (TaskConfig, batches, closed_set_task, generate_openset_task, load_idx,
                   reference_task_config)
from .errors import ConfigError
from .eval import RunReport
from .nn import LossConfig, Network, SgdConfig, he_init, small_conv_net
from .ortho import lsuv_init
from .tensor import Rng
from .train import train

METHODS = {
    "baseline_ce": ("none", False),
    "almost_right": ("almost_right", False),
    "hard_ortho": ("hard_ortho", False),
    "lsuv_init": ("none", True),
    "lsuv_plus_almost_right": ("almost_right", True),
}
PRECISIONS = {"float64": np.float64, "float32": np.float32}
ALPHA_GRID = (0.10, 0.25, 0.40, 0.50, 0.60, 0.75, 0.90)
REFERENCE_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class LsuvConfig:
    tol_var: float = 0.01
    max_iters: int = 10


@dataclass
class ModelConfig:
    k1: int = 16
    k2: int = 32


@dataclass
class IdxTaskConfig:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    val_fraction: float = 0.1
    split_seed: int = 0


@dataclass
class ExperimentConfig:
    method: str = "almost_right"
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs/default"
    precision: str = "float64"
    tau_deg: float = 10.0
    task: TaskConfig | IdxTaskConfig = field(default_factory=TaskConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    lsuv: LsuvConfig = field(default_factory=LsuvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        regularizer, _ = METHODS[self.method]
        if self.loss.regularizer != regularizer:
            raise ConfigError(f"loss.regularizer={self.loss.regularizer!r} conflicts with method {self.method!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision: expected float64 or float32, got {self.precision!r}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")

    @property
    def uses_lsuv(self) -> bool:
        return METHODS[self.method][1]

    def snapshot(self) -> dict:
        d = asdict(self)
        d["task"]["kind"] = "idx" if isinstance(self.task, IdxTaskConfig) else "synthetic"
        return d

    def with_alpha(self, alpha: float, output_dir: str | None = None) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        cfg.loss = LossConfig(alpha=alpha, epsilon=self.loss.epsilon, regularizer=self.loss.regularizer,
                              first_activation=self.loss.first_activation)
        if output_dir is not None:
            cfg.output_dir = output_dir
        return cfg


def reference_config(method: str = "almost_right", alpha: float = 0.5, seeds=REFERENCE_SEEDS,
                     output_dir: str = "runs/reference") -> ExperimentConfig:
    """Desk-scale recipe: batch 20, lr 0.005 x0.1 every 12 epochs, 15 epochs."""
    regularizer = METHODS[method][0]
    return ExperimentConfig(method=method, seeds=list(seeds), output_dir=output_dir,
                            task=reference_task_config(),
                            loss=LossConfig(alpha=alpha, regularizer=regularizer))


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    raw = dict(raw)
    top = {"method", "seeds", "output_dir", "precision", "tau_deg", "task", "loss", "sgd", "lsuv", "model"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    method = raw.get("method", "almost_right")
    if method not in METHODS:
        raise ConfigError(f"method: unknown method {method!r}; expected one of {sorted(METHODS)}")
    task_raw = dict(raw.get("task", {}))
    kind = task_raw.pop("kind", "synthetic")
    if kind == "synthetic":
        task = _build(TaskConfig, "task", task_raw)
    elif kind == "idx":
        task = _build(IdxTaskConfig, "task", task_raw)
        if base_dir is not None:
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                p = Path(getattr(task, key))
                if not p.is_absolute():
                    setattr(task, key, str(base_dir / p))
    else:
        raise ConfigError(f"[task] kind must be 'synthetic' or 'idx', got {kind!r}")
    loss_raw = dict(raw.get("loss", {}))
    if "regularizer" in loss_raw and loss_raw["regularizer"] != METHODS[method][0]:
        raise ConfigError(f"[loss] regularizer={loss_raw['regularizer']!r} conflicts with method {method!r}")
    loss_raw["regularizer"] = METHODS[method][0]
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds: expected a list of non-negative integers")
    output_dir = raw.get("output_dir", "runs/default")
    if base_dir is not None and not Path(output_dir).is_absolute():
        output_dir = str(base_dir / output_dir)
    return ExperimentConfig(
        method=method,
        seeds=seeds,
        output_dir=output_dir,
        precision=raw.get("precision", "float64"),
        tau_deg=float(raw.get("tau_deg", 10.0)),
        task=task,
        loss=_build(LossConfig, "loss", loss_raw),
        sgd=_build(SgdConfig, "sgd", raw.get("sgd", {})),
        lsuv=_build(LsuvConfig, "lsuv", raw.get("lsuv", {})),
        model=_build(ModelConfig, "model", raw.get("model", {})),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent)


def build_task(cfg: ExperimentConfig):
    if isinstance(cfg.task, IdxTaskConfig):
        t = cfg.task
        return closed_set_task(load_idx(t.train_images, t.train_labels), t.val_fraction,
                               Rng(t.split_seed).child("idx/split"),
                               test_pairs=load_idx(t.test_images, t.test_labels))
    return generate_openset_task(cfg.task)


def build_network(cfg: ExperimentConfig, task, seed: int) -> tuple[Network, dict]:
    """Initialized network for one seed plus a log of how it was initialized."""
    c, h, w = task.train.images.shape[1:]
    if h != w:
        raise ConfigError("only square images are supported")
    net = small_conv_net(in_channels=c, image_size=h, n_classes=task.n_classes,
                         first_activation=cfg.loss.first_activation, k1=cfg.model.k1, k2=cfg.model.k2)
    rng = Rng(seed)
    if cfg.uses_lsuv:
        probe, _, _ = next(batches(task.train, cfg.sgd.batch_size, rng.child("batches/0")))
        report = lsuv_init(net, probe.astype(np.float64), rng.child("init/lsuv"),
                           tol_var=cfg.lsuv.tol_var, max_iters=cfg.lsuv.max_iters)
        log = {"scheme": "lsuv", **report.to_dict()}
    else:
        he_init(net, rng.child("init/he"))
        log = {"scheme": "gaussian_fan_in", "std": "sqrt(2 / fan_in)"}
    net.astype(PRECISIONS[cfg.precision])
    return net, log


def run_seed(cfg: ExperimentConfig, seed: int, task=None) -> tuple[RunReport, Network]:
    task = task if task is not None else build_task(cfg)
    net, log = build_network(cfg, task, seed)
    report = train(net, task, cfg.loss, cfg.sgd, Rng(seed), config_snapshot=cfg.snapshot(),
                   tau_deg=cfg.tau_deg, init_log=log)
    return report, net


def _run_seed_job(args):
    cfg, seed = args
    return run_seed(cfg, seed)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("NEAR_ORTHO_THREADS", "1")))
    except ValueError:
        return 1


def run_many(jobs: list[tuple[ExperimentConfig, int]], task=None) -> list[tuple[RunReport, Network]]:
    """Run (config, seed) jobs, concurrently up to NEAR_ORTHO_THREADS processes.

    Results come back in job order and do not depend on the worker count.
    """
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        return [run_seed(cfg, seed, task) for cfg, seed in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_seed_job, jobs))

"""Metrics, run reports and cross-seed aggregation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with ties credited one half.

    Computed from average ranks, so it is O(n log n) and exactly equal to
    ``(#(pos > neg) + 0.5 * #(pos == neg)) / (n_pos * n_neg)``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InputError(f"{scores.size} scores but {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise InputError("labels must be binary (0/1)")
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUROC needs both classes present")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    # 2 * average rank of each distinct value, kept integral
    upper = np.cumsum(counts)
    twice_rank = 2 * upper - counts + 1
    twice_sum = int(twice_rank[inverse][pos].sum())
    twice_u = twice_sum - n_pos * (n_pos + 1)
    return (twice_u / 2) / (n_pos * n_neg)


def auroc_bruteforce(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p = scores[labels == 1]
    n = scores[labels == 0]
    if p.size == 0 or n.size == 0:
        raise InputError("AUROC needs both classes present")
    gt = int((p[:, None] > n[None, :]).sum())
    eq = int((p[:, None] == n[None, :]).sum())
    return (gt + 0.5 * eq) / (p.size * n.size)


def top1_accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax is the label; ties go to the lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise InputError(f"expected N x C logits with N >= 1, got shape {logits.shape}")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def anomaly_scores(logits) -> np.ndarray:
    """Softmax probability of class 1 (the anomalous class)."""
    from .nn import softmax

    return softmax(logits)[:, 1]


@dataclass
class RunReport:
    seed: int
    config: dict
    metric_name: str
    test_metric: float
    best_epoch: int
    best_val_metric: float
    train_loss: list[float] = field(default_factory=list)
    train_ce: list[float] = field(default_factory=list)
    train_reg: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    geometry_init: dict = field(default_factory=dict)
    geometry_best: dict = field(default_factory=dict)
    init_log: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.test_metric <= 1.0:
            raise ValueError(f"{self.metric_name} must lie in [0, 1], got {self.test_metric}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, include_wall_time: bool = True) -> str:
        d = self.to_dict()
        if not include_wall_time:
            d.pop("wall_time_s")
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


def _config_without_seed(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in ("seed", "master_seed", "output_dir")}


@dataclass
class Aggregate:
    mean: float
    std: float
    n: int
    single_run: bool


def mean_std(values) -> Aggregate:
    values = [float(v) for v in values]
    if not values:
        raise InputError("need at least one value")
    n = len(values)
    mean = math.fsum(values) / n
    if n == 1:
        return Aggregate(mean, 0.0, 1, True)
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return Aggregate(mean, math.sqrt(var), n, False)


def aggregate(reports: list[RunReport]) -> dict[str, Aggregate]:
    """Mean and sample (n-1) standard deviation of each metric across seeds."""
    if not reports:
        raise InputError("need at least one report")
    ref = _config_without_seed(reports[0].config)
    for r in reports[1:]:
        if _config_without_seed(r.config) != ref:
            raise InputError("reports come from different configurations")
    out = {
        "test_metric": mean_std(r.test_metric for r in reports),
        "best_val_metric": mean_std(r.best_val_metric for r in reports),
    }
    if all(r.geometry_best for r in reports):
        for key in ("mean_abs_cos", "mean_signed_cos", "frac_near_orthogonal"):
            out[key] = mean_std(r.geometry_best[key] for r in reports)
    return out


AGGREGATE_COLUMNS = ["method", "alpha", "seed_count", "metric_mean", "metric_std",
                     "mean_abs_cos_mean", "mean_signed_cos_mean", "frac_near_orthogonal_mean"]


def aggregate_row(method: str, alpha: float, reports: list[RunReport]) -> dict:
    agg = aggregate(reports)
    row = {
        "method": method,
        "alpha": alpha,
        "seed_count": len(reports),
        "metric_mean": agg["test_metric"].mean,
        "metric_std": agg["test_metric"].std,
    }
    for key in ("mean_abs_cos", "mean_signed_cos", "frac_near_orthogonal"):
        row[f"{key}_mean"] = agg[key].mean if key in agg else math.nan
    return row


def aggregate_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=AGGREGATE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()

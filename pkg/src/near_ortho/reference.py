"""The reference open-set experiment: baseline vs. the alpha grid, 5 seeds each.

Results can be cached on disk. A cache entry is keyed by the run's resolved
config, its seed and a hash of this package's source, so any code change
invalidates it.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .data import generate_openset_task
from .eval import RunReport, aggregate
from .experiment import REFERENCE_SEEDS, ALPHA_GRID, reference_config, run_many

# (method, alpha); alpha is ignored by baseline_ce
REFERENCE_ARMS = [("baseline_ce", 1.0)] + [("almost_right", a) for a in (*ALPHA_GRID, 1.0)]


def source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _cache_key(cfg, seed, code) -> str:
    blob = json.dumps({"config": cfg.snapshot(), "seed": seed, "code": code}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def run_reference(arms=REFERENCE_ARMS, seeds=REFERENCE_SEEDS, cache_dir=None,
                  progress=None) -> dict[tuple[str, float], list[RunReport]]:
    cache = Path(cache_dir) if cache_dir else None
    code = source_hash()
    cfgs = {arm: reference_config(arm[0], arm[1], seeds, output_dir="runs/reference") for arm in arms}
    results: dict[tuple[str, float], list] = {arm: [None] * len(seeds) for arm in arms}
    todo = []
    for arm, cfg in cfgs.items():
        for i, seed in enumerate(seeds):
            path = cache / f"{_cache_key(cfg, seed, code)}.json" if cache else None
            if path is not None and path.exists():
                results[arm][i] = RunReport.from_dict(json.loads(path.read_text()))
            else:
                todo.append((arm, i, seed, path))
    if todo:
        task = generate_openset_task(next(iter(cfgs.values())).task)
        for arm, i, seed, path in todo:
            (report, _), = run_many([(cfgs[arm], seed)], task)
            results[arm][i] = report
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(report.to_json())
            if progress:
                progress(arm, seed, report)
    return results


def summarize_reference(results) -> list[dict]:
    rows = []
    for (method, alpha), reports in results.items():
        agg = aggregate(reports)
        rows.append({
            "method": method,
            "alpha": alpha,
            "seed_count": len(reports),
            "auroc_mean": agg["test_metric"].mean,
            "auroc_std": agg["test_metric"].std,
            "mean_abs_cos_mean": agg["mean_abs_cos"].mean,
            "mean_signed_cos_mean": agg["mean_signed_cos"].mean,
            "frac_near_orthogonal_mean": agg["frac_near_orthogonal"].mean,
        })
    return rows

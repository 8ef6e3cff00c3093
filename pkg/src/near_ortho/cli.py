"""Command-line entry point.

Exit codes:
    0  success
    2  bad config, bad arguments or missing file
    3  training diverged
    4  checkpoint/task unreadable or incompatible
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .data import export_task, import_task
from .diagnostics import gram_spectrum, matrix_csv, pairwise_cosine_matrix, angle_summary
from .errors import ConfigError, DimensionError, DivergenceError, FormatError, InputError
from .eval import aggregate_csv, aggregate_row
from .experiment import ALPHA_GRID, build_task, load_config, run_many
from .nn import load_checkpoint, save_checkpoint
from .ortho import KernelBank
from .train import evaluate

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_INCOMPATIBLE = 0, 2, 3, 4


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_experiment(cfg, jobs_cfgs):
    """Train every (config, seed) job, writing report + checkpoint per seed."""
    task = build_task(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = export_task(task, out / "task")
    jobs = [(c, s) for c in jobs_cfgs for s in c.seeds]
    results = run_many(jobs, task)
    by_cfg = {}
    for (c, seed), (report, net) in zip(jobs, results):
        d = Path(c.output_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"report_seed{seed}.json").write_text(report.to_json() + "\n")
        save_checkpoint(net, d / f"ckpt_seed{seed}.nowt")
        by_cfg.setdefault(id(c), (c, []))[1].append(report)
    return manifest, list(by_cfg.values())


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.full_recipe:
        cfg.sgd.epochs = 50
    manifest, groups = _run_experiment(cfg, [cfg])
    _write_json(Path(cfg.output_dir) / "config.resolved.json", cfg.snapshot())
    for c, reports in groups:
        for r in reports:
            print(f"seed {r.seed}: test {r.metric_name} = {r.test_metric:.4f} "
                  f"(best epoch {r.best_epoch}, mean |cos| {r.geometry_best['mean_abs_cos']:.4f})")
    print(f"task manifest: {manifest}")
    return EXIT_OK


def cmd_eval(args) -> int:
    for p in (args.ckpt, args.task):
        if not Path(p).exists():
            return _fail(EXIT_CONFIG, f"no such file: {p}")
    try:
        net = load_checkpoint(args.ckpt)
        task = import_task(args.task)
        name, metric, ce = evaluate(net, task.test, task.open_set)
    except (FormatError, DimensionError, InputError, KeyError) as exc:
        return _fail(EXIT_INCOMPATIBLE, str(exc))
    out = Path(args.out) if args.out else Path(str(args.ckpt) + ".eval.json")
    _write_json(out, {"checkpoint": str(args.ckpt), "checkpoint_sha256": _sha256(args.ckpt),
                      "task": str(args.task), "metric_name": name, "metric": metric, "test_ce": ce})
    print(f"test {name} = {metric:.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if not Path(args.ckpt).exists():
        return _fail(EXIT_CONFIG, f"no such file: {args.ckpt}")
    try:
        net = load_checkpoint(args.ckpt)
    except FormatError as exc:
        return _fail(EXIT_INCOMPATIBLE, str(exc))
    kb = KernelBank.of(net)
    cos = pairwise_cosine_matrix(kb, args.epsilon)
    summary = angle_summary(cos, args.tau, gram_spectrum(kb))
    stem = Path(args.out) if args.out else Path(str(args.ckpt))
    d = summary.to_dict()
    d.update({"checkpoint": str(args.ckpt), "checkpoint_sha256": _sha256(args.ckpt),
              "epsilon": args.epsilon, "K": kb.K, "D": kb.D})
    _write_json(Path(str(stem) + ".geometry.json"), d)
    Path(str(stem) + ".cosine.csv").write_text(matrix_csv(cos))
    Path(str(stem) + ".spectrum.csv").write_text(matrix_csv(summary.gram_eigenvalues))
    print(f"K={kb.K} D={kb.D} mean |cos|={summary.mean_abs_cos:.4f} "
          f"mean cos={summary.mean_signed_cos:.4f} near-orthogonal={summary.frac_near_orthogonal:.3f}")
    return EXIT_OK


def _parse_alphas(text):
    if text in ("grid", "default"):
        return list(ALPHA_GRID)
    try:
        alphas = [float(a) for a in text.split(",") if a.strip()]
    except ValueError as exc:
        raise ConfigError(f"--alphas: {exc}") from exc
    if not alphas:
        raise ConfigError("--alphas: at least one value is required")
    return alphas


def cmd_sweep_alpha(args) -> int:
    cfg = load_config(args.config)
    if cfg.loss.regularizer == "none":
        raise ConfigError(f"method: {cfg.method!r} has no regularizer to weight; sweep needs one")
    alphas = _parse_alphas(args.alphas)
    root = Path(cfg.output_dir)
    cfgs = [cfg.with_alpha(a, str(root / f"alpha_{a:g}")) for a in alphas]
    _, groups = _run_experiment(cfg, cfgs)
    rows = [aggregate_row(c.method, c.loss.alpha, reports) for c, reports in groups]
    (root / "sweep_alpha.csv").write_text(aggregate_csv(rows))
    _write_json(root / "sweep_alpha.config.json", {"base_config": cfg.snapshot(), "alphas": alphas,
                                                   "seeds": cfg.seeds})
    for row in rows:
        print(f"alpha {row['alpha']:.2f}: {row['metric_mean']:.4f} +/- {row['metric_std']:.4f} "
              f"(n={row['seed_count']}, mean |cos| {row['mean_abs_cos_mean']:.4f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="near-ortho", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model per seed")
    p.add_argument("--config", required=True)
    p.add_argument("--full-recipe", action="store_true", help="train for the full 50 epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a task's test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True, help="task manifest.json (or its directory)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="first-layer kernel geometry of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tau", type=float, default=10.0, help="near-orthogonal band half-width (degrees)")
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--out", help="output path stem (default: the checkpoint path)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep-alpha", help="train over a grid of alpha values")
    p.add_argument("--config", required=True)
    p.add_argument("--alphas", default="grid", help="comma-separated values, or 'grid' for the standard seven")
    p.set_defaults(func=cmd_sweep_alpha)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_CONFIG, f"no such file: {exc.filename}")
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGED, str(exc))
    except (FormatError, DimensionError) as exc:
        return _fail(EXIT_INCOMPATIBLE, str(exc))


if __name__ == "__main__":
    sys.exit(main())

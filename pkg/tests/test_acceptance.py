"""Exit criteria for the package, one test per criterion.

Each test appends a PASS/FAIL line to the terminal summary. Criteria 5 and 6
train 45 models on the reference task (about 20 minutes on one core); set
NEAR_ORTHO_ACCEPTANCE_CACHE to a directory to reuse finished runs while the
package source is unchanged.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, central_difference, max_rel_error, random_tiny_net
from near_ortho.cli import main
from near_ortho.data import (TaskConfig, export_task, generate_openset_task, import_task, load_idx)
from near_ortho.diagnostics import pairwise_cosine_matrix
from near_ortho.eval import auroc, auroc_bruteforce
from near_ortho.experiment import ALPHA_GRID
from near_ortho.nn import (LossConfig, backward, checkpoint_bytes, checkpoint_from_bytes, he_init,
                           load_checkpoint, save_checkpoint, small_conv_net)
from near_ortho.ortho import (almost_right_grad, almost_right_loss, hard_ortho_grad, hard_ortho_loss,
                              layer_output_variances, lsuv_init)
from near_ortho.reference import run_reference
from near_ortho.tensor import Rng


def record(number, title, passed, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
    print(ACCEPTANCE_LINES[-1])


def test_1_eq1_exactness():
    e1, e2 = np.eye(2)
    analytic = [
        (np.stack([e1, e1]), 1.0),
        (np.stack([e1, e2]), 0.0),
        (np.stack([e1, e2, (e1 + e2) / math.sqrt(2)]), math.sqrt(2) / 3),
    ]
    worst_analytic = max(abs(almost_right_loss(b) - v) for b, v in analytic)
    g = np.random.default_rng(101)
    worst_consistency = 0.0
    for _ in range(100):
        a = g.normal(size=(int(g.integers(2, 17)), int(g.integers(2, 65))))
        c = pairwise_cosine_matrix(a)
        upper = c[np.triu_indices(len(a), 1)].mean()
        worst_consistency = max(worst_consistency, abs(upper - almost_right_loss(a)))
    passed = worst_analytic <= 1e-6 and worst_consistency <= 1e-12
    record(1, "loss exactness", passed,
           f"analytic max err {worst_analytic:.2e} (<=1e-6), cosine-matrix consistency {worst_consistency:.2e} (<=1e-12)")
    assert passed


def scaled_error(analytic, numeric, floor=1e-8):
    """Max |a - n| over entries above ``floor``, relative to the largest such entry.

    Elementwise ratios on entries near ``floor`` measure central-difference
    roundoff (about eps * |f| / h), not the gradient.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale > floor
    if not mask.any():
        return 0.0
    return float(np.abs(a - n)[mask].max() / scale[mask].max())


def test_2_gradient_fidelity():
    g = np.random.default_rng(202)
    worst = {"almost_right": 0.0, "hard_ortho": 0.0}
    elementwise = 0.0
    for _ in range(100):
        bank = g.normal(size=(int(g.integers(2, 17)), int(g.integers(2, 65))))
        for name, f, df in (("almost_right", almost_right_loss, almost_right_grad),
                            ("hard_ortho", hard_ortho_loss, hard_ortho_grad)):
            num = central_difference(lambda: f(bank), bank, h=1e-5)
            worst[name] = max(worst[name], scaled_error(df(bank), num))
            elementwise = max(elementwise, max_rel_error(df(bank), num))
    worst_net = worst_net_elementwise = 0.0
    for _ in range(20):
        net = random_tiny_net(g)
        x = g.normal(size=(3, *net.input_shape))
        y = g.integers(0, net.n_outputs, 3)
        cfg = LossConfig(alpha=0.5, regularizer="almost_right")
        backward(net, x, y, cfg)
        analytic = [{k: v.copy() for k, v in l.grads.items()} for l in net.layers]
        for layer, grads in zip(net.layers, analytic):
            for name, p in layer.params.items():
                num = central_difference(lambda: backward(net, x, y, cfg).total, p, h=1e-5)
                worst_net = max(worst_net, scaled_error(grads[name], num))
                worst_net_elementwise = max(worst_net_elementwise, max_rel_error(grads[name], num))
    passed = worst["almost_right"] < 1e-6 and worst["hard_ortho"] < 1e-6 and worst_net < 1e-3
    record(2, "gradient fidelity", passed,
           f"almost_right {worst['almost_right']:.2e}, hard_ortho {worst['hard_ortho']:.2e} (<1e-6); "
           f"20 nets {worst_net:.2e} (<1e-3); worst elementwise ratio {elementwise:.1e} banks, "
           f"{worst_net_elementwise:.1e} nets")
    assert passed


def test_3_auroc_oracle():
    g = np.random.default_rng(303)
    mismatches = 0
    transform_ok = True
    for _ in range(500):
        n = int(g.integers(2, 501))
        labels = g.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = g.integers(0, int(g.integers(2, 60)), n) / 10.0
        fast = auroc(scores, labels)
        mismatches += fast != auroc_bruteforce(scores, labels)
        transform_ok &= auroc(np.exp(scores), labels) == fast and auroc(2.5 * scores - 3.0, labels) == fast
    passed = mismatches == 0 and transform_ok
    record(3, "AUROC oracle equivalence", passed,
           f"{mismatches} mismatches in 500 tied instances; transform invariance {'holds' if transform_ok else 'broken'}")
    assert passed


def test_4_lsuv_contract():
    net = small_conv_net(first_activation="sigmoid")
    probe = Rng(404).generator.normal(size=(20, 1, 32, 32))
    report = lsuv_init(net, probe, Rng(405), tol_var=0.01, max_iters=10)
    variances = layer_output_variances(net, probe)
    worst_var = max(abs(v - 1.0) for v in variances.values())
    worst_ortho = max(l.ortho_error for l in report.layers)
    passed = worst_var <= 0.05 and worst_ortho <= 1e-6 and len(report.layers) == 3
    record(4, "LSUV contract", passed,
           f"max |var-1| {worst_var:.2e} (<=0.05), max |GG^T-I| {worst_ortho:.2e} (<=1e-6)")
    assert passed


@pytest.fixture(scope="module")
def reference():
    start = time.perf_counter()
    results = run_reference(cache_dir=os.environ.get("NEAR_ORTHO_ACCEPTANCE_CACHE"))
    return results, time.perf_counter() - start


def _mean(values):
    return float(np.mean(list(values)))


@pytest.mark.slow
def test_5_decorrelation_effect(reference):
    results, _ = reference
    reg = results[("almost_right", 0.5)]
    base = results[("almost_right", 1.0)]
    reg_cos = _mean(r.geometry_best["mean_abs_cos"] for r in reg)
    base_cos = _mean(r.geometry_best["mean_abs_cos"] for r in base)
    reduction = 1.0 - reg_cos / base_cos
    paired = sum(a.geometry_best["mean_abs_cos"] < b.geometry_best["mean_abs_cos"] for a, b in zip(reg, base))
    epochs = reg[0].config["sgd"]["epochs"]
    passed = reduction >= 0.30 and len(reg) == 5 and epochs == 15
    record(5, "de-correlation effect", passed,
           f"mean |cos| alpha=0.5 {reg_cos:.4f} vs alpha=1.0 {base_cos:.4f}: "
           f"{100 * reduction:.1f}% lower (needs >=30%); lower in {paired}/5 paired seeds")
    assert passed


@pytest.mark.slow
def test_6_generalization_direction(reference):
    results, elapsed = reference
    ar = _mean(r.test_metric for r in results[("almost_right", 0.5)])
    ce = _mean(r.test_metric for r in results[("baseline_ce", 1.0)])
    curve = [_mean(r.test_metric for r in results[("almost_right", a)]) for a in ALPHA_GRID]
    spread = max(curve) - min(curve)
    direction = ar >= ce - 0.01
    passed = direction and spread >= 0.005
    record(6, "generalization direction", passed,
           f"AUROC almost_right {ar:.4f} vs baseline_ce {ce:.4f} (needs >= {ce - 0.01:.4f}); "
           f"alpha-sweep spread {spread:.4f} (needs >=0.005); curve "
           + ", ".join(f"{a:.2f}:{m:.3f}" for a, m in zip(ALPHA_GRID, curve))
           + f"; suite time {elapsed / 60:.1f} min")
    assert passed


TINY_CONFIG = """
method = "lsuv_plus_almost_right"
seeds = [0, 1]
output_dir = "out"
[task]
image_size = 16
n_train = 40
n_val = 20
n_test = 20
seed = 3
[sgd]
epochs = 2
batch_size = 10
[model]
k1 = 6
k2 = 4
"""


def _snapshot(directory):
    out = {}
    for path in sorted(directory.rglob("*")):
        if path.is_file():
            data = path.read_bytes()
            if path.suffix == ".json" and path.name.startswith("report_seed"):
                d = json.loads(data)
                d.pop("wall_time_s")
                data = json.dumps(d, sort_keys=True).encode()
            out[str(path.relative_to(directory))] = data
    return out


def test_7_reproducibility(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(TINY_CONFIG)
    snapshots = []
    for _ in range(2):
        assert main(["train", "--config", str(cfg)]) == 0
        assert main(["sweep-alpha", "--config", str(cfg), "--alphas", "0.25,0.75"]) == 0
        ckpt = tmp_path / "out" / "ckpt_seed1.nowt"
        assert main(["eval", "--ckpt", str(ckpt), "--task", str(tmp_path / "out" / "task")]) == 0
        assert main(["analyze", "--ckpt", str(ckpt)]) == 0
        snapshots.append(_snapshot(tmp_path / "out"))
    differing = [k for k in snapshots[0] if snapshots[0][k] != snapshots[1].get(k)]
    passed = not differing and snapshots[0].keys() == snapshots[1].keys() and len(snapshots[0]) > 10
    record(7, "reproducibility", passed,
           f"{len(snapshots[0])} output files compared across reruns, {len(differing)} differ (wall time excluded)")
    assert passed


def test_8_format_round_trips(tmp_path):
    import struct

    net = he_init(small_conv_net(first_activation="sigmoid"), Rng(8))
    save_checkpoint(net, tmp_path / "a.nowt")
    loaded = load_checkpoint(tmp_path / "a.nowt")
    ckpt_ok = checkpoint_bytes(loaded) == (tmp_path / "a.nowt").read_bytes() and all(
        np.array_equal(a.params[k], b.params[k].astype(np.float32).astype(np.float64))
        for a, b in zip(loaded.layers, net.layers) for k in a.params)
    f32 = net.astype(np.float32)
    ckpt_ok &= all(a.params[k].tobytes() == b.params[k].tobytes()
                   for a, b in zip(checkpoint_from_bytes(checkpoint_bytes(f32), np.float32).layers, f32.layers)
                   for k in a.params)

    task = generate_openset_task(TaskConfig(n_train=30, n_val=10, n_test=10, image_size=16, seed=8))
    back = import_task(export_task(task, tmp_path / "task"))
    task_ok = all(task.splits[s].images.tobytes() == back.splits[s].images.tobytes()
                  and task.splits[s].labels.tobytes() == back.splits[s].labels.tobytes()
                  and task.splits[s].ids.tolist() == back.splits[s].ids.tolist()
                  and task.splits[s].families == back.splits[s].families for s in task.splits)

    pixels = [[0, 17, 255], [128, 64, 1], [9, 99, 200], [255, 0, 33]]
    (tmp_path / "i.idx").write_bytes(struct.pack(">IIII", 0x803, 4, 1, 3) + bytes(sum(pixels, [])))
    (tmp_path / "l.idx").write_bytes(struct.pack(">II", 0x801, 4) + bytes([7, 0, 2, 9]))
    pairs = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    idx_ok = [y for _, y in pairs] == [7, 0, 2, 9] and all(
        np.array_equal(img, np.array(p, dtype=np.float64).reshape(1, 1, 3) / 255.0) for (img, _), p in zip(pairs, pixels))

    passed = ckpt_ok and task_ok and idx_ok
    record(8, "format round-trips", passed,
           f"checkpoint {'exact' if ckpt_ok else 'MISMATCH'}, task {'exact' if task_ok else 'MISMATCH'}, "
           f"IDX fixture {'exact' if idx_ok else 'MISMATCH'}")
    assert passed

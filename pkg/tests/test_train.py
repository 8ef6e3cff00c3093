import numpy as np
import pytest

from near_ortho.data import TaskConfig, generate_openset_task
from near_ortho.errors import DivergenceError
from near_ortho.experiment import ExperimentConfig, ModelConfig, build_network, run_seed
from near_ortho.nn import LossConfig, SgdConfig, checkpoint_bytes
from near_ortho.tensor import Rng
from near_ortho.train import as_checkpoint, evaluate, train

TASK = TaskConfig(n_train=40, n_val=20, n_test=20, image_size=16, seed=11)


def tiny_cfg(method="almost_right", epochs=2, **loss):
    regularizer = {"baseline_ce": "none", "lsuv_init": "none",
                   "lsuv_plus_almost_right": "almost_right"}.get(method, method)
    return ExperimentConfig(method=method, task=TASK, loss=LossConfig(regularizer=regularizer, **loss),
                            sgd=SgdConfig(epochs=epochs, batch_size=10), model=ModelConfig(k1=6, k2=4))


@pytest.fixture(scope="module")
def task():
    return generate_openset_task(TASK)


def test_zero_epochs_reports_initial_weights(task):
    cfg = tiny_cfg(epochs=0)
    net, _ = build_network(cfg, task, 0)
    before = checkpoint_bytes(net)
    r = train(net, task, cfg.loss, cfg.sgd, Rng(0))
    assert r.best_epoch == 0 and r.train_loss == [] and r.val_metric == []
    assert checkpoint_bytes(net) == before
    _, metric, _ = evaluate(as_checkpoint(net), task.test)
    assert r.test_metric == metric
    assert r.geometry_init == r.geometry_best


@pytest.mark.parametrize("method", ["baseline_ce", "almost_right", "hard_ortho", "lsuv_init",
                                    "lsuv_plus_almost_right"])
def test_same_seed_bit_identical(task, method):
    a, _ = run_seed(tiny_cfg(method), 3, task)
    b, _ = run_seed(tiny_cfg(method), 3, task)
    assert a.to_json(include_wall_time=False) == b.to_json(include_wall_time=False)
    c, _ = run_seed(tiny_cfg(method), 4, task)
    assert c.train_loss != a.train_loss


def test_report_contents(task):
    r, net = run_seed(tiny_cfg(epochs=3), 0, task)
    assert len(r.train_loss) == len(r.val_metric) == len(r.val_loss) == 3
    assert 1 <= r.best_epoch <= 3
    assert r.best_val_metric == max(r.val_metric)
    assert r.val_metric.index(r.best_val_metric) + 1 == r.best_epoch
    assert r.metric_name == "auroc" and 0 <= r.test_metric <= 1
    assert r.config["method"] == "almost_right" and r.seed == 0
    for total, ce, reg in zip(r.train_loss, r.train_ce, r.train_reg):
        assert total == pytest.approx(0.5 * ce + 0.5 * reg, rel=1e-12)
    assert r.init_log["scheme"] == "gaussian_fan_in"
    # net holds checkpoint-precision weights of the selected epoch
    assert checkpoint_bytes(net) == checkpoint_bytes(as_checkpoint(net))


def test_divergence_names_epoch_and_step(task):
    cfg = tiny_cfg(method="baseline_ce")
    cfg.sgd = SgdConfig(lr0=1e6, epochs=2, batch_size=10)
    net, _ = build_network(cfg, task, 0)
    with pytest.raises(DivergenceError) as info:
        train(net, task, cfg.loss, cfg.sgd, Rng(0))
    assert info.value.epoch == 0 and info.value.step >= 1


def test_float32_training_mode(task):
    cfg = tiny_cfg()
    cfg.precision = "float32"
    r, net = run_seed(cfg, 0, task)
    assert net.first_conv.params["weight"].dtype == np.float32
    assert np.isfinite(r.train_loss).all()


def test_lsuv_logged(task):
    r, _ = run_seed(tiny_cfg("lsuv_init"), 0, task)
    assert r.init_log["scheme"] == "lsuv"
    assert r.init_log["tol_var"] == 0.01 and r.init_log["max_iters"] == 10
    assert all(abs(l["variance"] - 1) <= 0.05 for l in r.init_log["layers"])

import numpy as np
import pytest

from near_ortho.nn import Activation, Conv2D, Dense, Flatten, MaxPool, Network


def central_difference(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-8):
    """Largest |a - n| / max(|a|, |n|) over entries where either side exceeds ``floor``."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    mask = scale > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a - n)[mask] / scale[mask]))


def random_tiny_net(rng: np.random.Generator) -> Network:
    """<= 3 parametric layers, <= 500 parameters, 6x6 inputs."""
    while True:
        c = int(rng.integers(1, 3))
        k = int(rng.integers(2, 4))
        ks = int(rng.integers(2, 4))
        pad = int(rng.integers(0, 2))
        size = 6
        layers = [Conv2D(c, k, ks, stride=1, padding=pad), Activation(str(rng.choice(["relu", "sigmoid"])))]
        out = size + 2 * pad - ks + 1
        if out % 2 == 0 and rng.random() < 0.5:
            layers.append(MaxPool(2))
            out //= 2
        ch = k
        if rng.random() < 0.5 and out >= 2:
            k2 = int(rng.integers(2, 4))
            layers += [Conv2D(k, k2, 2, stride=1, padding=0), Activation("sigmoid")]
            out -= 1
            ch = k2
        n_classes = int(rng.integers(2, 4))
        layers += [Flatten(), Dense(ch * out * out, n_classes)]
        net = Network(layers, (c, size, size))
        if net.n_params() <= 500:
            break
    for _, layer in net.parametric():
        for name, p in layer.params.items():
            layer.params[name] = rng.normal(0, 0.5, p.shape)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

"""First-layer kernel regularizers and orthonormal (LSUV) initialization.

The soft regularizer is the mean signed cosine similarity over all kernel
pairs of the first convolution, each kernel flattened across channels and
both spatial axes:

    L = 2 / (K (K - 1)) * sum_{i<j} <A_i, A_j> / (|A_i| |A_j| + eps)

The hard baseline drives the normalized Gram matrix to the identity:

    H = || G_hat - I ||_F^2 = sum_{i != j} cos_ij^2

with the same eps-guarded cosine. A zero kernel therefore counts as
orthogonal to everything in both losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegeneracyError, DimensionError
from .nn import Conv2D, Dense, Network, forward
from .tensor import Rng, gaussian, gram_schmidt_rows

DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class KernelBank:
    """K x D matrix of flattened kernels, D = C * h * w."""

    rows: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise DimensionError(f"kernel bank must be 2-D, got shape {self.rows.shape}")

    @property
    def K(self) -> int:
        return self.rows.shape[0]

    @property
    def D(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def of(cls, net: Network) -> "KernelBank":
        return flatten_kernels(net.first_conv.params["weight"])


def flatten_kernels(conv_weights) -> KernelBank:
    w = np.asarray(conv_weights)
    if w.ndim != 4:
        raise DimensionError(f"expected K x C x h x w weights, got shape {w.shape}")
    return KernelBank(w.reshape(w.shape[0], -1))


def unflatten_kernels(rows, shape) -> np.ndarray:
    return np.asarray(rows).reshape(shape)


def _rows(kb) -> np.ndarray:
    rows = kb.rows if isinstance(kb, KernelBank) else np.asarray(kb)
    return np.asarray(rows, dtype=np.float64)


def _cosines(a, epsilon):
    """Dot products, norms, eps-guarded denominators and cosines."""
    norms = np.sqrt(np.einsum("ij,ij->i", a, a))
    dots = a @ a.T
    den = np.outer(norms, norms) + epsilon
    return dots, norms, den, dots / den


def _weighted_cosine_grad(a, norms, dots, den, weights):
    """sum_j weights_ij * d cos_ij / d A_i, for each row i (weights has zero diagonal)."""
    w_over = weights / den
    first = w_over @ a
    coef = (w_over * dots / den * norms[None, :]).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = np.where(norms[:, None] > 0, a / norms[:, None], 0.0)
    return first - coef[:, None] * unit


def almost_right_loss(kb, epsilon: float = DEFAULT_EPS) -> float:
    a = _rows(kb)
    k = a.shape[0]
    if k < 2:
        return 0.0
    _, _, _, cos = _cosines(a, epsilon)
    iu = np.triu_indices(k, 1)
    return float(cos[iu].sum() * (2.0 / (k * (k - 1))))


def almost_right_grad(kb, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    a = _rows(kb)
    k = a.shape[0]
    if k < 2:
        return np.zeros_like(a)
    dots, norms, den, _ = _cosines(a, epsilon)
    weights = np.full((k, k), 2.0 / (k * (k - 1)))
    np.fill_diagonal(weights, 0.0)
    return _weighted_cosine_grad(a, norms, dots, den, weights)


def hard_ortho_loss(kb, epsilon: float = DEFAULT_EPS) -> float:
    a = _rows(kb)
    if a.shape[0] < 2:
        return 0.0
    _, _, _, cos = _cosines(a, epsilon)
    np.fill_diagonal(cos, 0.0)
    return float((cos**2).sum())


def hard_ortho_grad(kb, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    a = _rows(kb)
    if a.shape[0] < 2:
        return np.zeros_like(a)
    dots, norms, den, cos = _cosines(a, epsilon)
    # each unordered pair appears twice in the Frobenius sum
    weights = 4.0 * cos
    np.fill_diagonal(weights, 0.0)
    return _weighted_cosine_grad(a, norms, dots, den, weights)


def combined_loss(ce: float, ar: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * ce + (1.0 - alpha) * ar


# ---------------------------------------------------------------- LSUV


@dataclass
class LayerInit:
    layer: int
    kind: str
    ortho_error: float
    iterations: int
    variance: float


@dataclass
class LsuvReport:
    tol_var: float
    max_iters: int
    layers: list[LayerInit] = field(default_factory=list)

    def to_dict(self):
        return {"tol_var": self.tol_var, "max_iters": self.max_iters,
                "layers": [vars(l) for l in self.layers]}


def orthonormal_weights(shape, rng: Rng) -> tuple[np.ndarray, float]:
    """Gaussian draw orthonormalized along its longer flattened axis.

    Returns the weights and max |Q Q^T - I| measured on the shorter axis.
    """
    out = shape[0]
    fan_in = int(np.prod(shape[1:]))
    for _ in range(3):
        m = gaussian(rng, (out, fan_in))
        try:
            q = gram_schmidt_rows(m) if out <= fan_in else gram_schmidt_rows(m.T).T
        except DegeneracyError:
            continue
        small = q if out <= fan_in else q.T
        err = float(np.abs(small @ small.T - np.eye(small.shape[0])).max())
        return q.reshape(shape), err
    raise DegeneracyError("could not draw a full-rank Gaussian matrix")


def lsuv_init(net: Network, probe_batch, rng: Rng, tol_var: float = 0.01,
              max_iters: int = 10) -> LsuvReport:
    """Layer-sequential unit-variance initialization, in place.

    Every Conv2D/Dense layer, first to last, gets orthonormal weights and zero
    bias, then its weights are divided by sqrt(var(output)) on the probe batch
    until |var - 1| <= tol_var or ``max_iters`` rescalings were made.
    """
    probe = np.asarray(probe_batch)
    if probe.shape[0] == 0:
        raise DegeneracyError("empty probe batch")
    report = LsuvReport(tol_var=tol_var, max_iters=max_iters)
    for idx, layer in net.parametric():
        if not isinstance(layer, (Conv2D, Dense)):
            continue
        w = layer.params["weight"]
        q, err = orthonormal_weights(w.shape, rng)
        layer.params["weight"] = q.astype(w.dtype)
        layer.params["bias"] = np.zeros_like(layer.params["bias"])
        iters = 0
        while True:
            var = float(np.var(forward(net, probe, upto=idx + 1)))
            if var < 1e-12:
                raise DegeneracyError(f"output variance of layer {idx} underflowed ({var:.3g})")
            if abs(var - 1.0) <= tol_var or iters >= max_iters:
                break
            layer.params["weight"] = layer.params["weight"] / np.sqrt(var)
            iters += 1
        layer.zero_grad()
        report.layers.append(LayerInit(idx, layer.kind, err, iters, var))
    return report


def layer_output_variances(net: Network, probe_batch) -> dict[int, float]:
    return {idx: float(np.var(forward(net, probe_batch, upto=idx + 1)))
            for idx, _ in net.parametric()}

"""Geometry of the first-layer kernel bank: cosines, angles, Gram spectrum."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericError
from .ortho import DEFAULT_EPS, KernelBank, _cosines, _rows

JACOBI_MAX_SWEEPS = 100


@dataclass
class GeometrySummary:
    cosine_matrix: np.ndarray
    mean_abs_cos: float
    mean_signed_cos: float
    min_angle_deg: float
    max_angle_deg: float
    frac_near_orthogonal: float
    tau_deg: float
    gram_eigenvalues: np.ndarray

    def to_dict(self, with_matrix=False) -> dict:
        d = asdict(self)
        d["gram_eigenvalues"] = [float(v) for v in self.gram_eigenvalues]
        if with_matrix:
            d["cosine_matrix"] = self.cosine_matrix.tolist()
        else:
            del d["cosine_matrix"]
        return d


def pairwise_cosine_matrix(kb, epsilon: float = DEFAULT_EPS) -> np.ndarray:
    a = _rows(kb)
    return _cosines(a, epsilon)[3]


def angle_summary(cos_matrix, tau_deg: float = 10.0, gram_eigenvalues=None) -> GeometrySummary:
    cos = np.asarray(cos_matrix, dtype=np.float64)
    k = cos.shape[0]
    iu = np.triu_indices(k, 1)
    upper = np.clip(cos[iu], -1.0, 1.0)
    angles = np.degrees(np.arccos(upper))
    if upper.size:
        near = float(np.mean(np.abs(angles - 90.0) <= tau_deg))
        stats = (float(np.abs(upper).mean()), float(upper.mean()), float(angles.min()), float(angles.max()))
    else:
        near, stats = 0.0, (0.0, 0.0, math.nan, math.nan)
    if gram_eigenvalues is None:
        gram_eigenvalues = jacobi_eigenvalues(_normalized_gram_from_cos(cos))
    return GeometrySummary(cos, *stats, frac_near_orthogonal=near, tau_deg=tau_deg,
                           gram_eigenvalues=np.asarray(gram_eigenvalues))


def _normalized_gram_from_cos(cos):
    g = np.clip(cos, -1.0, 1.0).copy()
    np.fill_diagonal(g, 1.0)
    return g


def normalized_gram(kb) -> np.ndarray:
    """Gram matrix of unit-normalized rows; zero rows stay zero."""
    a = _rows(kb)
    norms = np.linalg.norm(a, axis=1)
    unit = np.divide(a, norms[:, None], out=np.zeros_like(a), where=norms[:, None] > 0)
    return unit @ unit.T


def jacobi_eigenvalues(sym, max_sweeps: int = JACOBI_MAX_SWEEPS, tol: float = 1e-14) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending."""
    a = np.array(sym, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            return np.sort(np.diag(a))[::-1].copy()
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
    raise NumericError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def gram_spectrum(kb) -> np.ndarray:
    k = _rows(kb).shape[0]
    if k > 128:
        raise ValueError(f"gram_spectrum supports K <= 128, got {k}")
    return jacobi_eigenvalues(normalized_gram(kb))


def summarize(kb: KernelBank, tau_deg: float = 10.0, epsilon: float = DEFAULT_EPS) -> GeometrySummary:
    return angle_summary(pairwise_cosine_matrix(kb, epsilon), tau_deg, gram_spectrum(kb))


def matrix_csv(m) -> str:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in m:
        writer.writerow(f"{v:.9g}" for v in row)
    return buf.getvalue()


def summary_json(summary: GeometrySummary, extra: dict | None = None) -> str:
    d = summary.to_dict()
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True)

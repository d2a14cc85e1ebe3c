"""Principal component analysis of trace matrices.

Traces are mean-adjusted column by column, the covariance eigenpairs are
sorted by decreasing eigenvalue and the first ``p`` eigenvectors ``V_m``
project the adjusted traces: ``Traces_m = (V_m' x Traces_adjust')'``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, TraceError, TraceMatrix


class InsufficientDataError(TraceError):
    pass


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray         # (N,)
    components: np.ndarray   # (N, p), unit eigenvectors as columns
    eigenvalues: np.ndarray  # (p,), nonincreasing

    @property
    def n_features(self) -> int:
        return self.mean.size

    @property
    def p(self) -> int:
        return self.eigenvalues.size

    @property
    def is_full(self) -> bool:
        return self.p == self.n_features


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, TraceMatrix):
        return data.samples
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def mean_adjust(data) -> tuple[np.ndarray, np.ndarray]:
    """Subtract each column's mean; returns ``(adjusted, mean)``."""
    x = _as_matrix(data)
    if x.shape[0] < 2:
        raise InsufficientDataError(f"mean adjustment needs >= 2 traces, got {x.shape[0]}")
    mean = x.mean(axis=0)
    return x - mean, mean


def covariance(data) -> np.ndarray:
    """Unbiased (M-1) sample covariance of the columns."""
    adjusted, _ = mean_adjust(data)
    return adjusted.T @ adjusted / (adjusted.shape[0] - 1)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of every column made positive.
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def fit(data, p: int | None = None) -> PcaModel:
    """Fit a PCA model keeping ``p`` components (all ``N`` by default).

    Uses the thin SVD of the mean-adjusted matrix (``eigenvalue = s**2 / (M-1)``)
    when ``p`` fits within its rank bound, else the covariance eigendecomposition.
    """
    x = _as_matrix(data)
    m, n = x.shape
    if p is None:
        p = n
    if not 1 <= p <= n:
        raise ValueError(f"number of components must be in [1, {n}], got {p}")
    adjusted, mean = mean_adjust(x)

    if p <= min(m, n):
        _, s, vt = np.linalg.svd(adjusted, full_matrices=False)
        values = s**2 / (m - 1)
        vectors = vt.T
    else:
        values, vectors = np.linalg.eigh(adjusted.T @ adjusted / (m - 1))
        order = np.argsort(-values, kind="stable")
        values, vectors = values[order], vectors[:, order]

    values = np.maximum(values[:p], 0.0)
    vectors = _fix_signs(vectors[:, :p])
    return PcaModel(mean, np.ascontiguousarray(vectors), values)


def project(model: PcaModel, data) -> np.ndarray:
    x = _as_matrix(data)
    if x.shape[1] != model.n_features:
        raise DimensionError(f"data has {x.shape[1]} columns, model expects {model.n_features}")
    return (model.components.T @ (x - model.mean).T).T


def project_set(model: PcaModel, traces: TraceMatrix) -> TraceMatrix:
    return traces.with_samples(project(model, traces))


def reconstruct(model: PcaModel, projected: np.ndarray) -> np.ndarray:
    """Back-map projected rows into mean-adjusted sample space."""
    return np.asarray(projected) @ model.components.T


def explained_variance(model: PcaModel) -> np.ndarray:
    """Per-component share of variance.

    Shares are of the total variance only when the model is full
    (``model.is_full``); otherwise they are of the retained variance.
    """
    total = model.eigenvalues.sum()
    if total <= 0:
        out = np.zeros(model.p)
        out[0] = 1.0
        return out
    return model.eigenvalues / total

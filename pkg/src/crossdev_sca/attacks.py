"""Classical baselines and device diagnostics.

* Difference-of-Means point-of-interest selection
* multivariate Gaussian templates on the selected points
* correlation power analysis with a Hamming-weight hypothesis
* training-group formation for multi-device profiling
* the 3-sigma outlier count over device-averaged traces
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmptyInputError, TraceError, TraceMatrix
from .synth import HW_TABLE, SBOX


class InsufficientClassesError(TraceError):
    pass


class InsufficientDataError(TraceError):
    pass


class TemplateError(ArithmeticError):
    pass


def class_means(traces: TraceMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Distinct key bytes and the mean trace of each, shapes ``(C,)`` and ``(C, N)``."""
    classes, inverse = np.unique(traces.key_bytes, return_inverse=True)
    sums = np.zeros((classes.size, traces.n_samples))
    np.add.at(sums, inverse, traces.samples)
    counts = np.bincount(inverse, minlength=classes.size)
    return classes, sums / counts[:, None]


# -- Difference of Means -------------------------------------------------

@dataclass(frozen=True)
class PoiSet:
    indices: np.ndarray
    scores: np.ndarray


def dom_scores(traces: TraceMatrix) -> np.ndarray:
    """Per-sample sum over unordered class pairs of ``|mean_a - mean_b|``."""
    classes, means = class_means(traces)
    if classes.size < 2:
        raise InsufficientClassesError("difference of means needs at least two key classes")
    # For sorted values s_0 <= ... <= s_{C-1}:  sum_{a<b} |s_a - s_b| = sum_k (2k - C + 1) s_k
    c = classes.size
    ordered = np.sort(means, axis=0)
    weights = 2 * np.arange(c) - c + 1
    return weights @ ordered


def dom_poi(traces: TraceMatrix, n_poi: int = 2) -> PoiSet:
    """The ``n_poi`` highest-scoring samples, best first (lower index wins ties)."""
    if n_poi < 1:
        raise ValueError(f"n_poi must be >= 1, got {n_poi}")
    scores = dom_scores(traces)
    order = np.argsort(-scores, kind="stable")[:n_poi]
    return PoiSet(order, scores[order])


# -- Gaussian templates --------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianTemplates:
    """One multivariate normal per key class over the POI samples."""

    classes: np.ndarray   # (C,)
    means: np.ndarray     # (C, k)
    covs: np.ndarray      # (C, k, k), regularised
    pois: np.ndarray      # (k,)

    def __post_init__(self):
        try:
            chol = np.linalg.cholesky(self.covs)
        except np.linalg.LinAlgError as exc:
            raise TemplateError("template covariance is not positive definite") from exc
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_logdet", logdet)

    @property
    def k(self) -> int:
        return self.means.shape[1]

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Log-pdf of each row of ``x`` (shape ``(B, k)``) under every class: ``(B, C)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.means[None, :, :]             # (B, C, k)
        # solve L z = diff for every class
        z = np.linalg.solve(self._chol[None], diff[..., None])[..., 0]
        maha = np.sum(z * z, axis=2)
        return -0.5 * (maha + self._logdet[None, :] + self.k * np.log(2.0 * np.pi))

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(x))


def fit_templates(traces: TraceMatrix, pois: PoiSet | np.ndarray, delta: float | None = None
                  ) -> GaussianTemplates:
    """Per-class mean and unbiased covariance over the POI columns.

    Covariances get ``delta * I`` added; by default ``delta = 1e-9 * rms**2``
    with ``rms`` the root-mean-square of all POI values.
    """
    idx = np.asarray(pois.indices if isinstance(pois, PoiSet) else pois, dtype=np.intp)
    k = idx.size
    x = traces.samples[:, idx]
    classes, inverse = np.unique(traces.key_bytes, return_inverse=True)
    counts = np.bincount(inverse, minlength=classes.size)
    short = classes[counts < k + 1]
    if short.size:
        raise InsufficientDataError(
            f"key class {int(short[0])} has {int(counts[classes == short[0]][0])} traces; "
            f"templates over {k} points need at least {k + 1}"
        )
    if delta is None:
        rms = float(np.sqrt(np.mean(x**2)))
        delta = 1e-9 * (rms**2 if rms > 0 else 1.0)

    means = np.empty((classes.size, k))
    covs = np.empty((classes.size, k, k))
    for c in range(classes.size):
        rows = x[inverse == c]
        means[c] = rows.mean(axis=0)
        centred = rows - means[c]
        covs[c] = centred.T @ centred / (rows.shape[0] - 1)
    covs += delta * np.eye(k)
    return GaussianTemplates(classes, means, covs, idx)


def template_classify(templates: GaussianTemplates, poi_vectors) -> np.ndarray:
    """Maximum-likelihood key byte for each POI vector (ties go to the lowest class)."""
    scores = templates.log_density(poi_vectors)
    return templates.classes[np.argmax(scores, axis=1)]


def template_attack(templates: GaussianTemplates, traces: TraceMatrix) -> np.ndarray:
    return template_classify(templates, traces.samples[:, templates.pois])


def confusion_matrix(true: np.ndarray, predicted: np.ndarray, n_classes: int = 256) -> np.ndarray:
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (np.asarray(true, dtype=np.intp), np.asarray(predicted, dtype=np.intp)), 1)
    return out


def mahalanobis_ellipse(mean: np.ndarray, cov: np.ndarray, n_sigma: float,
                        n_points: int = 100) -> np.ndarray:
    """Points on the ``n_sigma`` Mahalanobis contour of a bivariate Gaussian, ``(n_points, 2)``."""
    theta = np.linspace(0.0, 2.0 * np.pi, n_points)
    circle = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return np.asarray(mean) + n_sigma * circle @ np.linalg.cholesky(cov).T


# -- CPA -------------------------------------------------------------------

@dataclass(frozen=True)
class CpaResult:
    ranking: np.ndarray       # key guesses, best first
    scores: np.ndarray        # (256,) max |rho| per guess
    correlations: np.ndarray  # (256, N)

    def rank_of(self, key: int) -> int:
        """1-based position of ``key`` in the ranking."""
        return int(np.flatnonzero(self.ranking == key)[0]) + 1


def pearson_columns(h: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Pearson correlation of every column of ``h`` with every column of ``t``.

    Pairs involving a zero-variance column get correlation 0.
    """
    hc = h - h.mean(axis=0)
    tc = t - t.mean(axis=0)
    hn = np.sqrt(np.sum(hc * hc, axis=0))
    tn = np.sqrt(np.sum(tc * tc, axis=0))
    denom = np.outer(hn, tn)
    num = hc.T @ tc
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(rho, -1.0, 1.0)


def cpa(traces: TraceMatrix, plaintext_byte: int | None = None) -> CpaResult:
    """Rank key guesses by ``max_j |rho(HW(SBox(p ^ g)), trace[:, j])|``.

    Per-trace plaintexts come from the trace labels unless ``plaintext_byte``
    overrides them.
    """
    if traces.n_traces < 2:
        raise InsufficientDataError("CPA needs at least two traces")
    if plaintext_byte is None:
        pts = traces.plaintext_bytes.astype(np.intp)
    else:
        pts = np.full(traces.n_traces, int(plaintext_byte), dtype=np.intp)
    guesses = np.arange(256)
    hyp = HW_TABLE[SBOX[pts[:, None] ^ guesses[None, :]]].astype(np.float64)
    rho = pearson_columns(hyp, traces.samples)
    scores = np.abs(rho).max(axis=1)
    return CpaResult(np.argsort(-scores, kind="stable"), scores, rho)


# -- device groups and diagnostics ------------------------------------------

@dataclass(frozen=True)
class DeviceGroup:
    index: int
    members: tuple[int, ...]

    @property
    def label(self) -> str:
        m = self.members
        if len(m) == 1:
            return f"D{m[0]}"
        if list(m) == list(range(m[0], m[0] + len(m))):
            return f"D{m[0]}-D{m[-1]}"
        return "+".join(f"D{d}" for d in m)


def form_groups(j: int, n_devices: int) -> list[DeviceGroup]:
    """Consecutive disjoint groups ``G_j(i) = {D(k), ..., D(k+j-1)}``, ``k = (i-1)j + 1``."""
    if not 1 <= j <= n_devices:
        raise ValueError(f"group size must be in [1, {n_devices}], got {j}")
    groups = []
    i = 1
    while (k := (i - 1) * j + 1) + j - 1 <= n_devices:
        groups.append(DeviceGroup(i, tuple(range(k, k + j))))
        i += 1
    return groups


def leave_one_out_groups(device_ids) -> list[DeviceGroup]:
    """Every group of all-but-one device, in order of the held-out device."""
    ids = list(device_ids)
    return [DeviceGroup(i + 1, tuple(d for d in ids if d != held)) for i, held in enumerate(ids)]


def device_mean_traces(traces: TraceMatrix) -> tuple[list[int], np.ndarray]:
    devices = traces.devices
    return devices, np.stack([traces.samples[traces.device_ids == d].mean(axis=0) for d in devices])


def outlier_count(mean_traces: np.ndarray) -> np.ndarray:
    """Samples of each device-averaged trace outside ``mu +/- 3 sigma``.

    ``mu`` and ``sigma`` (population) are taken per sample position across
    the rows of ``mean_traces``.
    """
    x = np.asarray(mean_traces, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (devices, samples) matrix, got shape {x.shape}")
    if x.shape[0] < 3:
        raise InsufficientDataError("outlier counting needs at least three devices")
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    return np.sum(np.abs(x - mu) > 3.0 * sigma, axis=1)

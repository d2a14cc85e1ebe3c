"""Dynamic time warping and DTW-based realignment of trace sets.

Cost of a warp path ``z(k) = (x(k), y(k))``::

    L(X, Y) = 1 / (Tx + Ty) * sum_k |X[x(k)] - Y[y(k)]| * c(k)
    c(k)    = (x(k) - x(k-1)) + (y(k) - y(k-1)),  with x(0) = y(0) = -1

so the first pair weighs 2, diagonal steps weigh 2 and horizontal/vertical
steps weigh 1.  For equal lengths ``Tx = Ty = T`` the normaliser is ``2T``.
Indices here are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .core import DimensionError, EmptyInputError, TraceMatrix, as_trace

_DIAG, _UP, _LEFT = 0, 1, 2


@dataclass(frozen=True)
class WarpPath:
    """Monotone index pairs; ``x`` indexes the first sequence, ``y`` the second."""

    x: np.ndarray
    y: np.ndarray
    cost: float

    def __len__(self) -> int:
        return self.x.size

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.x.tolist(), self.y.tolist()))


@numba.njit(cache=True)
def _dtw_dp(x, y, band):
    n = x.shape[0]
    m = y.shape[0]
    acc = np.full((n, m), np.inf)
    step = np.zeros((n, m), dtype=np.int8)
    slope = (m - 1) / (n - 1) if n > 1 else 0.0
    for i in range(n):
        if band >= 0:
            centre = i * slope
            lo = max(0, int(np.ceil(centre - band)))
            hi = min(m, int(np.floor(centre + band)) + 1)
        else:
            lo = 0
            hi = m
        for j in range(lo, hi):
            d = abs(x[i] - y[j])
            if i == 0 and j == 0:
                acc[0, 0] = 2.0 * d
                continue
            # Preference on ties: diagonal, then advance x, then advance y.
            best = np.inf
            move = _DIAG
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1] + 2.0 * d
            if i > 0:
                c = acc[i - 1, j] + d
                if c < best:
                    best = c
                    move = _UP
            if j > 0:
                c = acc[i, j - 1] + d
                if c < best:
                    best = c
                    move = _LEFT
            acc[i, j] = best
            step[i, j] = move
    return acc, step


@numba.njit(cache=True)
def _traceback(step):
    n, m = step.shape
    i = n - 1
    j = m - 1
    xs = np.empty(n + m, dtype=np.int64)
    ys = np.empty(n + m, dtype=np.int64)
    k = 0
    xs[k] = i
    ys[k] = j
    while i > 0 or j > 0:
        move = step[i, j]
        if move == _DIAG:
            i -= 1
            j -= 1
        elif move == _UP:
            i -= 1
        else:
            j -= 1
        k += 1
        xs[k] = i
        ys[k] = j
    return xs[: k + 1][::-1].copy(), ys[: k + 1][::-1].copy()


def _warp(x: np.ndarray, y: np.ndarray, band: int | None) -> WarpPath:
    if x.size == 0 or y.size == 0:
        raise EmptyInputError("dtw needs non-empty sequences")
    r = -1 if band is None else int(band)
    if band is not None:
        if r < 0:
            raise ValueError(f"band radius must be >= 0, got {band}")
    acc, step = _dtw_dp(x, y, r)
    total = acc[-1, -1]
    if not np.isfinite(total):
        raise ValueError("no warp path fits inside the band")
    xs, ys = _traceback(step)
    return WarpPath(xs, ys, float(total / (x.size + y.size)))


def dtw(x, y, band: int | None = None) -> WarpPath:
    """Minimum-cost warp path between two equal-length traces.

    ``band`` enables a Sakoe-Chiba window of that radius (off by default).
    """
    x = as_trace(x)
    y = as_trace(y)
    if x.size != y.size:
        raise DimensionError(f"dtw needs equal lengths, got {x.size} and {y.size}")
    return _warp(x, y, band)


def dtw_unequal(x, y, band: int | None = None) -> WarpPath:
    """Same recurrence as :func:`dtw` for sequences of different lengths."""
    return _warp(as_trace(x), as_trace(y), band)


@dataclass(frozen=True)
class AlignmentResult:
    aligned: TraceMatrix
    modified_reference: np.ndarray
    widths: np.ndarray  # W_i after each iteration


def realign_set(misaligned: TraceMatrix, reference, band: int | None = None) -> AlignmentResult:
    """Warp every row against a growing reference (iterative DTW realignment).

    Row ``i`` is warped against the reference as modified by rows ``1..i-1``;
    the new path stretches both the row (by its x indices) and the reference
    and every previously aligned row (by its y indices).  Rather than
    rewriting all earlier rows at every step, the y index maps are composed
    backwards once at the end, which yields the same matrix in O(M * W).
    """
    reference = as_trace(reference)
    if reference.size != misaligned.n_samples:
        raise DimensionError(
            f"reference length {reference.size} != trace length {misaligned.n_samples}"
        )
    rows = misaligned.samples
    m = rows.shape[0]
    xs, ys = [], []
    widths = np.empty(m, dtype=np.int64)
    ref = reference
    for i in range(m):
        path = _warp(rows[i], ref, band)
        xs.append(path.x.astype(np.int32))
        ys.append(path.y.astype(np.int32))
        ref = ref[path.y]
        widths[i] = ref.size

    out = np.empty((m, ref.size))
    cols = np.arange(ref.size)
    for i in range(m - 1, -1, -1):
        out[i] = rows[i, xs[i][cols]]
        cols = ys[i][cols]
    return AlignmentResult(misaligned.with_samples(out), reference[cols], widths)


def standardize(t: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance copy (constant traces are only centred)."""
    centred = t - t.mean()
    sd = centred.std()
    return centred / sd if sd > 0 else centred


def warp_to_reference(trace, reference, band: int | None = None,
                      normalize: bool = False) -> np.ndarray:
    """Map ``trace`` onto a fixed reference's time axis.

    Each reference index receives the mean of the trace samples paired with
    it, so the output has the reference's length.  With ``normalize`` the
    path is computed on standardized copies of both traces, which keeps a
    device's gain and offset from steering the alignment; the output still
    carries the original amplitudes.
    """
    trace = as_trace(trace)
    reference = as_trace(reference)
    if normalize:
        path = _warp(standardize(trace), standardize(reference), band)
    else:
        path = _warp(trace, reference, band)
    sums = np.bincount(path.y, weights=trace[path.x], minlength=reference.size)
    counts = np.bincount(path.y, minlength=reference.size)
    return sums / counts


def warp_set_to_reference(traces: TraceMatrix, reference, band: int | None = None,
                          normalize: bool = False) -> TraceMatrix:
    reference = as_trace(reference)
    out = np.empty((traces.n_traces, reference.size))
    for i, row in enumerate(traces.samples):
        out[i] = warp_to_reference(row, reference, band, normalize)
    return traces.with_samples(out)


def resample_to_length(t, length: int) -> np.ndarray:
    """Linear-interpolation resampling onto ``length`` evenly spaced points."""
    if length < 1:
        raise ValueError(f"target length must be >= 1, got {length}")
    t = as_trace(t)
    if length == t.size:
        return t.copy()
    if length == 1:
        return t[:1].copy()
    grid = np.linspace(0.0, t.size - 1, length)
    return np.interp(grid, np.arange(t.size), t)


def resample_set(traces: TraceMatrix, length: int) -> TraceMatrix:
    if length < 1:
        raise ValueError(f"target length must be >= 1, got {length}")
    n = traces.n_samples
    if length == n:
        return traces
    grid = np.linspace(0.0, n - 1, length)
    lo = np.minimum(np.floor(grid).astype(np.intp), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = grid - lo
    s = traces.samples
    return traces.with_samples(s[:, lo] * (1.0 - frac) + s[:, hi] * frac)

"""Trace/label data model shared by every stage of the attack pipeline.

A :class:`TraceMatrix` holds ``M`` power traces of identical length ``N``
together with one label per trace (key byte, plaintext byte, device id).
Amplitudes are in arbitrary units; nothing downstream assumes a physical
scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class TraceError(ValueError):
    """Base class for malformed trace data."""


class DimensionError(TraceError):
    """Raised when array shapes or trace lengths disagree."""


class EmptyInputError(TraceError):
    """Raised when an operation receives no traces."""


class TraceLabel(NamedTuple):
    key_byte: int
    plaintext_byte: int
    device_id: int


def as_trace(samples) -> np.ndarray:
    """Validate a single trace and return it as a float64 vector."""
    t = np.asarray(samples, dtype=np.float64)
    if t.ndim != 1:
        raise DimensionError(f"trace must be 1-D, got shape {t.shape}")
    if t.size == 0:
        raise EmptyInputError("trace has no samples")
    if not np.all(np.isfinite(t)):
        raise TraceError("trace contains NaN or Inf samples")
    return t


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TraceMatrix:
    """``M x N`` matrix of power samples with per-row labels.

    Arrays are copied and frozen on construction, so instances can be shared
    read-only between threads.
    """

    samples: np.ndarray
    key_bytes: np.ndarray
    plaintext_bytes: np.ndarray
    device_ids: np.ndarray

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise DimensionError(f"samples must be 2-D, got shape {samples.shape}")
        m, n = samples.shape
        if m < 1 or n < 1:
            raise EmptyInputError(f"trace matrix must be non-empty, got {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise TraceError("samples contain NaN or Inf")

        labels = {}
        for name, dtype, hi in (
            ("key_bytes", np.uint8, 255),
            ("plaintext_bytes", np.uint8, 255),
            ("device_ids", np.uint16, 65535),
        ):
            raw = np.asarray(getattr(self, name))
            if raw.ndim == 0:
                raw = np.full(m, raw)
            if raw.shape != (m,):
                raise DimensionError(f"{name} has shape {raw.shape}, expected ({m},)")
            raw = raw.astype(np.int64)
            lo = 1 if name == "device_ids" else 0
            if raw.size and (raw.min() < lo or raw.max() > hi):
                raise TraceError(f"{name} outside [{lo}, {hi}]")
            labels[name] = raw.astype(dtype)

        object.__setattr__(self, "samples", _readonly(samples))
        for name, arr in labels.items():
            object.__setattr__(self, name, _readonly(arr))

    @property
    def n_traces(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape

    def __len__(self) -> int:
        return self.n_traces

    def label(self, i: int) -> TraceLabel:
        return TraceLabel(int(self.key_bytes[i]), int(self.plaintext_bytes[i]), int(self.device_ids[i]))

    @property
    def devices(self) -> list[int]:
        """Distinct device ids in first-appearance order."""
        _, first = np.unique(self.device_ids, return_index=True)
        return [int(self.device_ids[i]) for i in np.sort(first)]

    def subset(self, index) -> TraceMatrix:
        """Rows selected by an integer index array or boolean mask."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        if index.size == 0:
            raise EmptyInputError("subset selects no traces")
        return TraceMatrix(
            self.samples[index],
            self.key_bytes[index],
            self.plaintext_bytes[index],
            self.device_ids[index],
        )

    def for_devices(self, device_ids: Sequence[int]) -> TraceMatrix:
        """Rows recorded on any of ``device_ids``, original order kept."""
        return self.subset(np.isin(self.device_ids, np.asarray(list(device_ids))))

    def with_samples(self, samples: np.ndarray) -> TraceMatrix:
        """Same labels, new sample matrix (row count must match, width may differ)."""
        samples = np.asarray(samples)
        if samples.ndim != 2 or samples.shape[0] != self.n_traces:
            raise DimensionError(
                f"replacement samples have shape {samples.shape}, need {self.n_traces} rows"
            )
        return TraceMatrix(samples, self.key_bytes, self.plaintext_bytes, self.device_ids)


def merge(sets: Sequence[TraceMatrix]) -> TraceMatrix:
    """Concatenate trace sets row-wise, keeping input order and device labels."""
    sets = list(sets)
    if not sets:
        raise EmptyInputError("merge needs at least one trace set")
    if len(sets) == 1:
        return sets[0]
    widths = {s.n_samples for s in sets}
    if len(widths) != 1:
        raise DimensionError(f"cannot merge trace sets of differing lengths {sorted(widths)}")
    return TraceMatrix(
        np.concatenate([s.samples for s in sets]),
        np.concatenate([s.key_bytes for s in sets]),
        np.concatenate([s.plaintext_bytes for s in sets]),
        np.concatenate([s.device_ids for s in sets]),
    )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def split_indices(key_bytes: np.ndarray, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test row indices.

    Each class contributes ``floor(n_c * f)`` or ``ceil(n_c * f)`` rows to the
    training side; the ceilings go to the classes with the largest fractional
    remainder (seeded random order among equal remainders) so that the total
    is ``round(M * f)``.
    """
    key_bytes = np.asarray(key_bytes)
    m = key_bytes.size
    if m == 0:
        raise EmptyInputError("cannot split an empty trace set")
    rng = np.random.default_rng(spec.seed)
    classes, counts = np.unique(key_bytes, return_counts=True)

    exact = counts * spec.train_fraction
    n_train = np.floor(exact).astype(np.int64)
    remaining = int(round(m * spec.train_fraction)) - int(n_train.sum())
    if remaining > 0:
        tiebreak = rng.permutation(classes.size)
        order = np.lexsort((tiebreak, -(exact - n_train)))
        eligible = order[n_train[order] < counts[order]]
        n_train[eligible[:remaining]] += 1

    train, test = [], []
    for cls, k in zip(classes, n_train):
        rows = np.flatnonzero(key_bytes == cls)
        rows = rows[rng.permutation(rows.size)]
        train.append(rows[:k])
        test.append(rows[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split(traces: TraceMatrix, spec: SplitSpec) -> tuple[TraceMatrix, TraceMatrix]:
    """Stratified (by key byte) deterministic train/test partition."""
    train_idx, test_idx = split_indices(traces.key_bytes, spec)
    if train_idx.size == 0 or test_idx.size == 0:
        raise EmptyInputError(
            f"split of {traces.n_traces} traces at {spec.train_fraction} leaves one side empty"
        )
    return traces.subset(train_idx), traces.subset(test_idx)

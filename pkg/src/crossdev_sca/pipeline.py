"""End-to-end cross-device attack experiments.

A method is a chain of optional stages in front of a classifier::

    [DTW warp -> edge trim -> resample] -> [PCA] -> MLP | CNN

Every preprocessing stage is fitted on the training group's traces only and
then applied unchanged to every test device.  Training devices are evaluated
on their held-out split; all other devices on all of their traces.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import align, pca as pca_mod
from .attacks import DeviceGroup, form_groups, leave_one_out_groups
from .core import SplitSpec, TraceMatrix, merge, split
from .io import parse_key_values, read_traces, write_model
from .nn import Network, TrainConfig, augment, init, train
from .synth import desk_config, inject_misalignment, synth_dataset

log = logging.getLogger(__name__)


class PipelineConfigError(ValueError):
    pass


# method -> (dtw, pca, arch)
METHODS = {
    "MLP": (False, False, "mlp"),
    "PCA-MLP": (False, True, "mlp"),
    "CNN": (False, False, "cnn"),
    "DTW-CNN": (True, False, "cnn"),
    "DTW-PCA-CNN": (True, True, "cnn"),
    "DTW-PCA-MLP": (True, True, "mlp"),
}


@dataclass
class PipelineConfig:
    method: str = "PCA-MLP"
    # training group: explicit ids win over (group_size, group_index)
    train_devices: tuple[int, ...] | None = None
    group_size: int = 1
    group_index: int = 1
    # data: a trace file, or the built-in synthetic scenario
    data: str | None = None
    n_devices: int = 5
    traces_per_device: int = 2560
    trace_length: int = 512
    synth_seed: int = 0
    max_shift: int = 0
    misalign_seed: int = 0
    train_fraction: float = 0.8
    split_seed: int = 0
    # preprocessing
    pca_components: int | None = None
    dtw_mode: str = "reference"
    dtw_reference_index: int = 0
    dtw_band: int | None = None
    dtw_normalize: bool = True
    edge_trim: int | None = None
    resample_length: int | None = None
    # classifier
    model_seed: int = 0
    mlp_hidden: tuple[int, ...] = (100, 100)
    mlp_dropout: float = 0.1
    cnn_filters: int = 70
    cnn_kernel: int = 60
    cnn_pool: int = 3
    cnn_fc_units: int = 150
    augment_total: int = 0
    augment_sigma: float = 0.0
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def stages(self) -> tuple[bool, bool, str]:
        return METHODS[self.method]

    @property
    def trim(self) -> int:
        """Samples dropped from each end after warping."""
        return self.max_shift if self.edge_trim is None else self.edge_trim

    def validate(self) -> None:
        if self.method not in METHODS:
            raise PipelineConfigError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        use_dtw, use_pca, _ = self.stages
        if self.dtw_mode not in ("reference", "iterative"):
            raise PipelineConfigError(f"dtw_mode must be 'reference' or 'iterative', got {self.dtw_mode!r}")
        if use_dtw and self.dtw_reference_index < 0:
            raise PipelineConfigError("DTW methods need a non-negative dtw_reference_index")
        if not use_dtw and (self.edge_trim or self.resample_length):
            raise PipelineConfigError(f"{self.method} has no DTW stage; edge_trim/resample_length do not apply")
        if not use_pca and self.pca_components is not None:
            raise PipelineConfigError(f"{self.method} has no PCA stage; pca_components does not apply")
        if self.pca_components is not None and self.pca_components < 1:
            raise PipelineConfigError("pca_components must be >= 1")
        if self.resample_length is not None and self.resample_length < 1:
            raise PipelineConfigError("resample_length must be >= 1")
        if self.trim < 0:
            raise PipelineConfigError("edge_trim must be >= 0")
        if self.max_shift < 0:
            raise PipelineConfigError("max_shift must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise PipelineConfigError("train_fraction must be in (0, 1)")
        if self.train_devices is None and not 1 <= self.group_index:
            raise PipelineConfigError("group_index must be >= 1")
        if self.augment_total < 0 or self.augment_sigma < 0:
            raise PipelineConfigError("augmentation settings must be >= 0")


# -- flat key=value configuration ----------------------------------------------------

def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text: str):
        return None if text.lower() in ("", "none") else conv(text)
    return parse


_PIPELINE_KEYS = {
    "method": str, "train_devices": _optional(_int_tuple), "group_size": int,
    "group_index": int, "data": _optional(str), "n_devices": int,
    "traces_per_device": int, "trace_length": int, "synth_seed": int, "max_shift": int,
    "misalign_seed": int, "train_fraction": float, "split_seed": int,
    "pca_components": _optional(int), "dtw_mode": str, "dtw_reference_index": int,
    "dtw_band": _optional(int), "dtw_normalize": _bool, "edge_trim": _optional(int),
    "resample_length": _optional(int), "model_seed": int, "mlp_hidden": _int_tuple,
    "mlp_dropout": float, "cnn_filters": int, "cnn_kernel": int, "cnn_pool": int,
    "cnn_fc_units": int, "augment_total": int, "augment_sigma": float,
}
_TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "l2_lambda": float, "learning_rate": float,
    "beta1": float, "beta2": float, "epsilon": float, "seed": int, "shuffle": _bool,
}


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    """Build a validated config from flat ``key=value`` lines.

    Keys are the :class:`PipelineConfig` field names plus the training keys
    ``epochs``, ``batch_size``, ``l2_lambda``, ``learning_rate``, ``beta1``,
    ``beta2``, ``epsilon``, ``seed`` and ``shuffle``.
    """
    values = parse_key_values(text, source)
    top, tr = {}, {}
    for key, raw in values.items():
        if key in _PIPELINE_KEYS:
            target, conv = top, _PIPELINE_KEYS[key]
        elif key in _TRAIN_KEYS:
            target, conv = tr, _TRAIN_KEYS[key]
        else:
            raise PipelineConfigError(f"{source}: unknown key {key!r}")
        try:
            target[key] = conv(raw)
        except ValueError as exc:
            raise PipelineConfigError(f"{source}: bad value for {key}: {exc}") from None
    try:
        cfg = PipelineConfig(train=TrainConfig(**tr), **top)
    except ValueError as exc:
        raise PipelineConfigError(f"{source}: {exc}") from None
    cfg.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def format_config(cfg: PipelineConfig) -> str:
    """Inverse of :func:`parse_config`."""
    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, tuple):
            return ",".join(map(str, v))
        return str(v).lower() if isinstance(v, bool) else str(v)
    lines = [f"{k}={fmt(getattr(cfg, k))}" for k in _PIPELINE_KEYS]
    lines += [f"{k}={fmt(getattr(cfg.train, k))}" for k in _TRAIN_KEYS]
    return "\n".join(lines) + "\n"


# -- data ------------------------------------------------------------------------

def load_dataset(cfg: PipelineConfig) -> TraceMatrix:
    """Trace file or synthetic scenario, with misalignment injected if configured."""
    if cfg.data:
        data = read_traces(cfg.data)
    else:
        data = synth_dataset(desk_config(cfg.n_devices, cfg.traces_per_device,
                                         cfg.trace_length, cfg.synth_seed))
    if cfg.max_shift:
        data = inject_misalignment(data, cfg.max_shift, np.random.default_rng(cfg.misalign_seed))
    return data


def training_group(cfg: PipelineConfig, devices: list[int]) -> DeviceGroup:
    if cfg.train_devices is not None:
        missing = set(cfg.train_devices) - set(devices)
        if missing:
            raise PipelineConfigError(f"training devices {sorted(missing)} not in dataset")
        return DeviceGroup(1, tuple(cfg.train_devices))
    groups = form_groups(cfg.group_size, len(devices))
    if cfg.group_index > len(groups):
        raise PipelineConfigError(
            f"group {cfg.group_index} does not exist for j={cfg.group_size} and {len(devices)} devices"
        )
    members = groups[cfg.group_index - 1].members
    # form_groups numbers devices 1..n; map onto the dataset's ids in order
    return DeviceGroup(cfg.group_index, tuple(devices[k - 1] for k in members))


# -- preprocessing ------------------------------------------------------------------

@dataclass
class Preprocessor:
    """Frozen DTW/PCA front end fitted on a training group."""

    reference: np.ndarray | None = None
    trim: int = 0
    resample_length: int | None = None
    band: int | None = None
    normalize: bool = True
    pca: pca_mod.PcaModel | None = None

    def warp(self, samples: np.ndarray) -> np.ndarray:
        if self.reference is None:
            return samples
        out = np.empty((samples.shape[0], self.reference.size))
        for i, row in enumerate(samples):
            out[i] = align.warp_to_reference(row, self.reference, self.band, self.normalize)
        return self._finish_warp(out)

    def _finish_warp(self, warped: np.ndarray) -> np.ndarray:
        if self.trim:
            if 2 * self.trim >= warped.shape[1]:
                raise PipelineConfigError(
                    f"edge trim {self.trim} leaves nothing of {warped.shape[1]} samples"
                )
            warped = warped[:, self.trim:-self.trim]
        if self.resample_length is not None:
            warped = np.stack([align.resample_to_length(r, self.resample_length) for r in warped])
        return warped

    def project(self, samples: np.ndarray) -> np.ndarray:
        return samples if self.pca is None else pca_mod.project(self.pca, samples)

    def transform(self, samples: np.ndarray) -> np.ndarray:
        return self.project(self.warp(samples))

    def meta(self) -> dict:
        return {"trim": self.trim, "resample_length": self.resample_length,
                "band": self.band, "normalize": self.normalize}


def fit_preprocessor(cfg: PipelineConfig, train_set: TraceMatrix) -> tuple[Preprocessor, np.ndarray]:
    """Fit the method's front end; returns it and the transformed training samples."""
    use_dtw, use_pca, _ = cfg.stages
    pre = Preprocessor(normalize=cfg.dtw_normalize, band=cfg.dtw_band)
    x = train_set.samples
    if use_dtw:
        if cfg.dtw_reference_index >= train_set.n_traces:
            raise PipelineConfigError(
                f"dtw_reference_index {cfg.dtw_reference_index} >= {train_set.n_traces} training traces"
            )
        pre.trim = cfg.trim
        pre.resample_length = cfg.resample_length
        reference = x[cfg.dtw_reference_index]
        if cfg.dtw_mode == "iterative":
            result = align.realign_set(train_set, reference, cfg.dtw_band)
            pre.reference = result.modified_reference
            x = pre._finish_warp(result.aligned.samples)
        else:
            pre.reference = reference.copy()
            x = pre.warp(x)
    if use_pca:
        pre.pca = pca_mod.fit(x, cfg.pca_components)
        x = pre.project(x)
    return pre, x


def build_network(cfg: PipelineConfig, input_dim: int) -> Network:
    arch = cfg.stages[2]
    if arch == "mlp":
        return init("mlp", input_dim, cfg.model_seed, hidden=tuple(cfg.mlp_hidden),
                    dropout=cfg.mlp_dropout)
    return init("cnn", input_dim, cfg.model_seed, filters=cfg.cnn_filters,
                kernel_size=cfg.cnn_kernel, pool_size=cfg.cnn_pool, fc_units=cfg.cnn_fc_units)


# -- reports ------------------------------------------------------------------------

@dataclass
class AttackReport:
    """Accuracy of every training group against every device.

    ``accuracy[g, d]`` is the held-out accuracy when device ``d`` belongs to
    group ``g`` (``excluded[g, d]`` is then set) and the whole-device
    accuracy otherwise.  Summaries only use cells that are not excluded.
    """

    method: str
    groups: list[DeviceGroup]
    devices: list[int]
    accuracy: np.ndarray
    excluded: np.ndarray
    train_seconds: list[float] = field(default_factory=list)
    predict_seconds: list[float] = field(default_factory=list)

    @property
    def n_train_devices(self) -> int:
        return len(self.groups[0].members)

    def cross_device(self) -> np.ndarray:
        """Accuracy matrix with excluded cells set to NaN."""
        return np.where(self.excluded, np.nan, self.accuracy)

    def same_device(self) -> dict[tuple[int, int], float]:
        """``(group index, device) -> accuracy`` on the held-out split of training devices."""
        out = {}
        for gi, g in enumerate(self.groups):
            for di, d in enumerate(self.devices):
                if self.excluded[gi, di]:
                    out[(g.index, d)] = float(self.accuracy[gi, di])
        return out

    def _cells(self) -> np.ndarray:
        return self.accuracy[~self.excluded]

    @property
    def avg(self) -> float:
        cells = self._cells()
        return float(cells.mean()) if cells.size else math.nan

    @property
    def max(self) -> float:
        cells = self._cells()
        return float(cells.max()) if cells.size else math.nan

    @property
    def min(self) -> float:
        cells = self._cells()
        return float(cells.min()) if cells.size else math.nan


def _evaluate_group(cfg: PipelineConfig, data: TraceMatrix, group: DeviceGroup, devices: list[int]):
    held_out = {}
    train_parts = []
    for d in group.members:
        tr, te = split(data.for_devices([d]), SplitSpec(cfg.train_fraction, cfg.split_seed + d))
        train_parts.append(tr)
        held_out[d] = te
    train_set = merge(train_parts)
    # nothing outside the group reaches the fitting stages
    assert set(train_set.devices) == set(group.members)

    t0 = time.perf_counter()
    pre, x = fit_preprocessor(cfg, train_set)
    y = train_set.key_bytes.astype(np.intp)
    if cfg.augment_total > len(x):
        x, y = augment(x, y, cfg.augment_total, cfg.augment_sigma,
                       np.random.default_rng([cfg.train.seed, 3]))
    net = build_network(cfg, x.shape[1])
    train(net, (x, y), None, cfg.train)
    t_train = time.perf_counter() - t0

    t0 = time.perf_counter()
    acc = np.empty(len(devices))
    excl = np.zeros(len(devices), dtype=bool)
    for i, d in enumerate(devices):
        test = held_out.get(d)
        if test is None:
            test = data.for_devices([d])
        else:
            excl[i] = True
        acc[i] = net.accuracy(pre.transform(test.samples), test.key_bytes)
    t_pred = time.perf_counter() - t0
    log.info("%s group %s: %s", cfg.method, group.label, np.round(acc, 4))
    return acc, excl, t_train, t_pred, net, pre


def cross_matrix(cfg: PipelineConfig, groups: list[DeviceGroup] | None = None,
                 data: TraceMatrix | None = None) -> AttackReport:
    """Train once per group and evaluate against every device.

    Group members are positions ``1..n`` in the dataset's device order.  With
    ``groups=None`` the consecutive groups of size ``cfg.group_size`` are used.
    """
    cfg.validate()
    if data is None:
        data = load_dataset(cfg)
    devices = data.devices
    if groups is None:
        groups = form_groups(cfg.group_size, len(devices))
    resolved = []
    for g in groups:
        bad = [k for k in g.members if not 1 <= k <= len(devices)]
        if bad:
            raise PipelineConfigError(f"group {g.label} refers to devices outside 1..{len(devices)}")
        resolved.append(DeviceGroup(g.index, tuple(devices[k - 1] for k in g.members)))

    rows, masks, t_train, t_pred = [], [], [], []
    for g in resolved:
        acc, excl, tt, tp, _, _ = _evaluate_group(cfg, data, g, devices)
        rows.append(acc)
        masks.append(excl)
        t_train.append(tt)
        t_pred.append(tp)
    return AttackReport(cfg.method, resolved, devices, np.array(rows), np.array(masks),
                        t_train, t_pred)


def run(cfg: PipelineConfig, data: TraceMatrix | None = None, model_out=None) -> AttackReport:
    """One training group (from ``train_devices`` or ``group_size``/``group_index``).

    With ``model_out`` the trained network is saved together with its
    preprocessing, so it can attack new trace files on its own.
    """
    cfg.validate()
    if data is None:
        data = load_dataset(cfg)
    devices = data.devices
    group = training_group(cfg, devices)
    acc, excl, tt, tp, net, pre = _evaluate_group(cfg, data, group, devices)
    if model_out is not None:
        write_model(model_out, net, pre.pca, pre.reference, pre.meta())
    return AttackReport(cfg.method, [group], devices, acc[None, :], excl[None, :], [tt], [tp])


def leave_one_out(cfg: PipelineConfig, data: TraceMatrix | None = None) -> AttackReport:
    """Train on all devices but one, for every held-out device."""
    cfg.validate()
    if data is None:
        data = load_dataset(cfg)
    n = len(data.devices)
    return cross_matrix(cfg, leave_one_out_groups(range(1, n + 1)), data)


# -- CSV output ------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def report_emit(report: AttackReport, directory) -> list[Path]:
    """Write ``accuracy_matrix.csv``, ``summary.csv`` and ``plot_data.csv``.

    Excluded (training-device) cells are empty in the matrix; the plot data
    keeps every cell and flags training devices instead.  Timings are left
    out so that reruns produce identical files.
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        paths = [directory / n for n in ("accuracy_matrix.csv", "summary.csv", "plot_data.csv")]
        with open(paths[0], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group"] + [f"D{d}" for d in report.devices])
            for g, acc, excl in zip(report.groups, report.accuracy, report.excluded):
                w.writerow([g.label] + ["" if e else _fmt(a) for a, e in zip(acc, excl)])
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "n_train_devices", "avg", "max", "min"])
            w.writerow([report.method, report.n_train_devices,
                        _fmt(report.avg), _fmt(report.max), _fmt(report.min)])
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "device", "accuracy", "training_device"])
            for g, acc, excl in zip(report.groups, report.accuracy, report.excluded):
                for d, a, e in zip(report.devices, acc, excl):
                    w.writerow([g.index, d, _fmt(a), int(e)])
    except OSError as exc:
        raise OSError(f"cannot write report to {directory}: {exc}") from exc
    return paths


def read_matrix_csv(path) -> tuple[list[str], list[int], np.ndarray]:
    """Parse ``accuracy_matrix.csv`` back; empty cells become NaN."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    devices = [int(h[1:]) for h in rows[0][1:]]
    labels = [r[0] for r in rows[1:]]
    values = np.array([[float(c) if c else np.nan for c in r[1:]] for r in rows[1:]])
    return labels, devices, values


def with_changes(cfg: PipelineConfig, **changes) -> PipelineConfig:
    """Copy of ``cfg`` with some fields replaced (training fields go to ``cfg.train``)."""
    train_changes = {k: changes.pop(k) for k in list(changes) if k in _TRAIN_KEYS}
    new = dataclasses.replace(cfg, **changes)
    if train_changes:
        new.train = dataclasses.replace(cfg.train, **train_changes)
    return new

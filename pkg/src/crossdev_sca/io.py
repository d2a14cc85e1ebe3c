"""Binary containers for trace sets, PCA models and trained attack models.

All multi-byte fields are little-endian.

Trace set (``SCAF``)::

    b"SCAF"  u16 version  u32 M  u32 N
    M x (u8 key_byte, u8 plaintext_byte, u16 device_id, N x f64 samples)

plus a UTF-8 ``key=value`` manifest next to it (same basename, suffix
``.manifest``).

PCA model (``SCAP``)::

    b"SCAP"  u32 N  u32 p  N x f64 mean  p x f64 eigenvalues  N*p x f64 components

Attack model (``SCAN``)::

    b"SCAN"  u16 version  u32 header_len  header (UTF-8 JSON)  tensors

The JSON header names the architecture, its config and every tensor in
storage order with its shape; tensors follow back to back as row-major f64.
An embedded PCA model and DTW reference are stored as extra tensors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import TraceError, TraceMatrix
from .nn.model import Network, build
from .pca import PcaModel

SCAF_MAGIC = b"SCAF"
SCAP_MAGIC = b"SCAP"
SCAN_MAGIC = b"SCAN"
SCAF_VERSION = 1
SCAN_VERSION = 1


class FormatError(TraceError):
    """File is truncated, has the wrong magic, or an unsupported version."""


def _record_dtype(n: int) -> np.dtype:
    return np.dtype([("key", "u1"), ("pt", "u1"), ("dev", "<u2"), ("samples", "<f8", (n,))])


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".manifest")


# -- trace sets ---------------------------------------------------------------

def write_traces(path, traces: TraceMatrix, manifest: dict | None = None) -> None:
    path = Path(path)
    m, n = traces.shape
    rec = np.empty(m, dtype=_record_dtype(n))
    rec["key"] = traces.key_bytes
    rec["pt"] = traces.plaintext_bytes
    rec["dev"] = traces.device_ids
    rec["samples"] = traces.samples
    try:
        with open(path, "wb") as fh:
            fh.write(SCAF_MAGIC + struct.pack("<HII", SCAF_VERSION, m, n))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write trace file {path}: {exc}") from exc
    if manifest is not None:
        write_manifest(manifest_path(path), manifest)


def read_traces(path) -> TraceMatrix:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 14 or raw[:4] != SCAF_MAGIC:
        raise FormatError(f"{path}: not a trace file")
    version, m, n = struct.unpack_from("<HII", raw, 4)
    if version != SCAF_VERSION:
        raise FormatError(f"{path}: unsupported trace file version {version}")
    dtype = _record_dtype(n)
    if len(raw) != 14 + m * dtype.itemsize:
        raise FormatError(f"{path}: expected {m} records of {n} samples, size mismatch")
    rec = np.frombuffer(raw, dtype=dtype, count=m, offset=14)
    return TraceMatrix(rec["samples"], rec["key"], rec["pt"], rec["dev"])


def write_manifest(path, entries: dict) -> None:
    lines = []
    for key, value in entries.items():
        value = str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"manifest entry {key!r} cannot be written as a key=value line")
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    return parse_key_values(path.read_text(encoding="utf-8"), str(path))


# -- PCA models -------------------------------------------------------------------

def pca_to_bytes(model: PcaModel) -> bytes:
    n, p = model.components.shape
    return b"".join([
        SCAP_MAGIC, struct.pack("<II", n, p),
        np.ascontiguousarray(model.mean, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.eigenvalues, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.components, dtype="<f8").tobytes(),
    ])


def pca_from_bytes(raw: bytes, source: str = "<bytes>") -> PcaModel:
    if len(raw) < 12 or raw[:4] != SCAP_MAGIC:
        raise FormatError(f"{source}: not a PCA model file")
    n, p = struct.unpack_from("<II", raw, 4)
    if len(raw) != 12 + 8 * (n + p + n * p):
        raise FormatError(f"{source}: size does not match N={n}, p={p}")
    data = np.frombuffer(raw, dtype="<f8", offset=12)
    return PcaModel(data[:n].copy(), data[n + p:].reshape(n, p).copy(), data[n:n + p].copy())


def write_pca(path, model: PcaModel) -> None:
    Path(path).write_bytes(pca_to_bytes(model))


def read_pca(path) -> PcaModel:
    return pca_from_bytes(Path(path).read_bytes(), str(path))


# -- attack models ----------------------------------------------------------------

def write_model(path, network: Network, pca: PcaModel | None = None,
                reference: np.ndarray | None = None, meta: dict | None = None) -> None:
    """Save a network with the preprocessing it was trained behind."""
    tensors = dict(network.state())
    if pca is not None:
        tensors["pca.mean"] = pca.mean
        tensors["pca.eigenvalues"] = pca.eigenvalues
        tensors["pca.components"] = pca.components
    if reference is not None:
        tensors["dtw.reference"] = np.asarray(reference, dtype=np.float64)
    header = {
        "arch": network.arch,
        "input_dim": network.input_dim,
        "config": network.config,
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SCAN_MAGIC + struct.pack("<HI", SCAN_VERSION, len(blob)))
        fh.write(blob)
        for value in tensors.values():
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def read_model(path) -> tuple[Network, PcaModel | None, np.ndarray | None, dict]:
    """Inverse of :func:`write_model`: ``(network, pca, reference, meta)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 10 or raw[:4] != SCAN_MAGIC:
        raise FormatError(f"{path}: not a model file")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != SCAN_VERSION:
        raise FormatError(f"{path}: unsupported model file version {version}")
    header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    offset = 10 + hlen
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise FormatError(f"{path}: truncated at tensor {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(raw, "<f8", count, offset).reshape(spec["shape"]).copy()
        offset += 8 * count
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")

    network = build(header["arch"], header["input_dim"], **header["config"])
    network.load_state(tensors)
    pca = None
    if "pca.mean" in tensors:
        pca = PcaModel(tensors["pca.mean"], tensors["pca.components"], tensors["pca.eigenvalues"])
    return network, pca, tensors.get("dtw.reference"), header["meta"]

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossdev_sca import pca
from crossdev_sca.core import TraceMatrix
from crossdev_sca.io import (
    FormatError, parse_key_values, read_manifest, read_model, read_pca, read_traces,
    write_manifest, write_model, write_pca, write_traces,
)
from crossdev_sca.nn import forward, init


def test_trace_file_layout(tmp_path):
    s = TraceMatrix([[1.5, -2.0], [0.25, 8.0]], [1, 255], [0, 7], [1, 300])
    path = tmp_path / "a.scaf"
    write_traces(path, s, {"seed": 3})
    raw = path.read_bytes()
    assert raw[:4] == b"SCAF"
    assert struct.unpack_from("<HII", raw, 4) == (1, 2, 2)
    assert raw[14:18] == bytes([1, 0]) + struct.pack("<H", 1)
    assert struct.unpack_from("<2d", raw, 18) == (1.5, -2.0)
    assert len(raw) == 14 + 2 * (4 + 16)
    back = read_traces(path)
    np.testing.assert_array_equal(back.samples, s.samples)
    np.testing.assert_array_equal(back.device_ids, s.device_ids)
    assert read_manifest(tmp_path / "a.manifest") == {"seed": "3"}


@settings(max_examples=20, deadline=None)
@given(m=st.integers(1, 20), n=st.integers(1, 30), seed=st.integers(0, 1000))
def test_trace_round_trip(tmp_path_factory, m, n, seed):
    rng = np.random.default_rng(seed)
    s = TraceMatrix(rng.normal(size=(m, n)), rng.integers(0, 256, m), rng.integers(0, 256, m),
                    rng.integers(1, 65536, m))
    path = tmp_path_factory.mktemp("rt") / "t.scaf"
    write_traces(path, s)
    back = read_traces(path)
    for f in ("samples", "key_bytes", "plaintext_bytes", "device_ids"):
        np.testing.assert_array_equal(getattr(back, f), getattr(s, f))


def test_bad_trace_files(tmp_path):
    p = tmp_path / "bad.scaf"
    p.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(FormatError):
        read_traces(p)
    s = TraceMatrix(np.zeros((2, 3)), 0, 0, 1)
    write_traces(p, s)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError, match="size mismatch"):
        read_traces(p)
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        read_traces(p)


def test_manifest_parsing(tmp_path):
    assert parse_key_values("# note\n\na = 1\nb=x=y\n") == {"a": "1", "b": "x=y"}
    with pytest.raises(ValueError, match=":2:"):
        parse_key_values("a=1\nbroken\n", "cfg")
    with pytest.raises(ValueError):
        write_manifest(tmp_path / "m", {"a": "line\nbreak"})


def test_pca_file(tmp_path):
    x = np.random.default_rng(0).normal(size=(12, 5))
    model = pca.fit(x, 3)
    write_pca(tmp_path / "p.scap", model)
    raw = (tmp_path / "p.scap").read_bytes()
    assert raw[:4] == b"SCAP" and struct.unpack_from("<II", raw, 4) == (5, 3)
    back = read_pca(tmp_path / "p.scap")
    np.testing.assert_array_equal(back.components, model.components)
    np.testing.assert_array_equal(back.eigenvalues, model.eigenvalues)
    np.testing.assert_array_equal(back.mean, model.mean)
    (tmp_path / "q.scap").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        read_pca(tmp_path / "q.scap")


@pytest.mark.parametrize("arch,cfg,dim", [("mlp", {"hidden": (7, 5)}, 9),
                                           ("cnn", {"filters": 2, "kernel_size": 4, "fc_units": 6}, 20)])
def test_model_round_trip(tmp_path, arch, cfg, dim):
    rng = np.random.default_rng(1)
    net = init(arch, dim, seed=2, **cfg)
    for _, layer, name, v in list(net.named_params()):
        layer.params[name] = rng.normal(size=v.shape)
    for _, layer, name, v in list(net.named_buffers()):
        layer.buffers[name] = rng.uniform(0.5, 1.5, size=v.shape)
    model = pca.fit(rng.normal(size=(30, dim)), 4)
    ref = rng.normal(size=dim)
    write_model(tmp_path / "m.scan", net, model, ref, {"trim": 3})
    back, p, r, meta = read_model(tmp_path / "m.scan")
    x = rng.normal(size=(3, dim))
    np.testing.assert_array_equal(forward(back, x), forward(net, x))
    np.testing.assert_array_equal(p.components, model.components)
    np.testing.assert_array_equal(r, ref)
    assert meta == {"trim": 3}
    raw = (tmp_path / "m.scan").read_bytes()
    (tmp_path / "t.scan").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        read_model(tmp_path / "t.scan")
    (tmp_path / "x.scan").write_bytes(b"SCAP" + raw[4:])
    with pytest.raises(FormatError):
        read_model(tmp_path / "x.scan")


def test_model_without_extras(tmp_path):
    net = init("mlp", 4)
    write_model(tmp_path / "m.scan", net)
    _, p, r, meta = read_model(tmp_path / "m.scan")
    assert p is None and r is None and meta == {}

"""Acceptance checks, one test per criterion.

The conftest prints a PASS/FAIL line per criterion at the end of the run.
Runtime bounds are asserted inside each test.
"""

import filecmp
import math
import time

import numpy as np
import pytest

from crossdev_sca import align, pca
from crossdev_sca.attacks import (
    confusion_matrix, cpa, dom_poi, fit_templates, form_groups, template_attack,
)
from crossdev_sca.nn import TrainConfig, init, train
from crossdev_sca.nn.layers import BatchNorm, Conv1D, Dense, Dropout, MaxPool1D, ReLU
from crossdev_sca.nn.model import build_cnn, build_mlp
from crossdev_sca.pipeline import (
    PipelineConfig, cross_matrix, load_dataset, report_emit, with_changes,
)
from crossdev_sca.synth import (
    HW_TABLE, SBOX, DeviceProfile, SynthConfig, desk_config, synth_dataset,
)

import oracles

CHANCE = 1.0 / 256


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# -- 1, 2: DTW ---------------------------------------------------------------------

@criterion(1, "DTW cost equals exhaustive path enumeration (200 pairs, T <= 8)")
def test_dtw_matches_exhaustive_enumeration():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    for _ in range(200):
        t = int(rng.integers(1, 9))
        x, y = rng.normal(size=t), rng.normal(size=t)
        path = align.dtw(x, y)
        expected = oracles.brute_force_dtw_cost(x, y)
        assert abs(path.cost - expected) <= 1e-12
        # the returned path really has the reported cost
        assert abs(oracles.path_cost(x, y, path.x, path.y) - path.cost) <= 1e-12
    assert time.perf_counter() - start < 10.0


def assert_warp_path_invariants(path, t):
    xs, ys = path.x, path.y
    k = len(path)
    assert xs[0] == 0 and ys[0] == 0
    assert xs[-1] == t - 1 and ys[-1] == t - 1
    dx, dy = np.diff(xs), np.diff(ys)
    assert np.all((dx == 0) | (dx == 1)) and np.all((dy == 0) | (dy == 1))
    assert np.all(dx + dy >= 1)
    assert t <= k < 2 * t


@criterion(2, "warp-path boundary/step/length invariants (1000 pairs, T <= 64)")
def test_warp_path_invariants():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    for _ in range(1000):
        t = int(rng.integers(1, 65))
        x = rng.normal(size=t)
        # mix unrelated pairs with shifted copies so both long and short paths occur
        y = rng.normal(size=t) if rng.random() < 0.5 else np.roll(x, int(rng.integers(0, t)))
        path = align.dtw(x, y)
        assert_warp_path_invariants(path, t)
        assert path.cost >= 0.0
    assert time.perf_counter() - start < 30.0


# -- 3: PCA --------------------------------------------------------------------------

@criterion(3, "PCA eigenpairs match a Jacobi oracle; orthonormal basis; isometry")
def test_pca_matches_jacobi_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 11))
        m = int(rng.integers(n + 2, 21))
        x = rng.normal(size=(m, n)) * rng.uniform(0.5, 3.0, size=n) + rng.normal(size=n)
        model = pca.fit(x)
        values, vectors = oracles.jacobi_eigh(oracles.sample_covariance_loop(x))
        np.testing.assert_allclose(model.eigenvalues, values, rtol=0, atol=1e-8)
        # eigenvectors agree up to sign
        signs = np.sign(np.sum(model.components * vectors, axis=0))
        np.testing.assert_allclose(model.components, vectors * signs, rtol=0, atol=1e-8)
        np.testing.assert_allclose(model.components.T @ model.components, np.eye(n), atol=1e-8)
        proj = pca.project(model, x)
        d_in = np.linalg.norm(x[:, None] - x[None, :], axis=2)
        d_out = np.linalg.norm(proj[:, None] - proj[None, :], axis=2)
        np.testing.assert_allclose(d_out, d_in, rtol=0, atol=1e-8)


# -- 4: gradients ------------------------------------------------------------------------

def _check_layer(layer, x, rng, before=None):
    """Compare analytic input and parameter gradients of ``sum(R * layer(x))``."""
    def f():
        if before:
            before()
        return float(np.sum(r * layer.forward(x, True)))

    if before:
        before()
    out = layer.forward(x, True)
    r = rng.normal(size=out.shape)
    if before:
        before()
    layer.forward(x, True)
    dx = layer.backward(r)
    assert oracles.rel_error(dx, oracles.numeric_grad(f, x)) < 1e-4
    for name, value in layer.params.items():
        assert oracles.rel_error(layer.grads[name], oracles.numeric_grad(f, value)) < 1e-4, name


def _randomize(net, rng):
    for _, layer, name, value in list(net.named_params()):
        layer.params[name] = rng.normal(size=value.shape)


def _check_network(net, x, labels, l2):
    net.seed_dropout(7)
    _, _, grads = net.loss_and_grads(x, labels, l2)

    def f():
        net.seed_dropout(7)
        return net.loss_and_grads(x, labels, l2)[0]

    for key, layer, name, value in list(net.named_params()):
        num = oracles.numeric_grad(f, layer.params[name])
        assert oracles.rel_error(grads[key], num) < 1e-4, key


@criterion(4, "finite-difference gradient checks for every layer and whole models")
def test_gradient_checks():
    rng = np.random.default_rng(4)
    start = time.perf_counter()

    dense = Dense(6, 4)
    dense.init(rng)
    dense.params["b"] = rng.normal(size=4)
    _check_layer(dense, rng.normal(size=(3, 6)), rng)
    _check_layer(ReLU(), rng.normal(size=(3, 7)), rng)
    bn = BatchNorm(5)
    bn.params["gamma"] = rng.normal(size=5)
    bn.params["beta"] = rng.normal(size=5)
    _check_layer(bn, rng.normal(size=(4, 5)), rng)
    drop = Dropout(0.3)
    _check_layer(drop, rng.normal(size=(3, 8)), rng,
                 before=lambda: setattr(drop, "rng", np.random.default_rng(99)))
    conv = Conv1D(2, 3, 4)
    conv.init(rng)
    conv.params["b"] = rng.normal(size=3)
    _check_layer(conv, rng.normal(size=(2, 2, 9)), rng)
    _check_layer(MaxPool1D(3), rng.normal(size=(2, 3, 10)), rng)

    # softmax + cross-entropy: gradient with respect to the logits
    logits = rng.normal(size=(3, 4))
    labels = np.array([0, 3, 1])

    def ce():
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return float(-np.mean(np.log(p[np.arange(3), labels])))

    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    analytic = p.copy()
    analytic[np.arange(3), labels] -= 1.0
    assert oracles.rel_error(analytic / 3, oracles.numeric_grad(ce, logits)) < 1e-4

    # whole MLP: input 8, hidden 5, 4 classes, batch 3 (with BN, dropout and L2)
    mlp = build_mlp(8, hidden=(5, 5), n_classes=4)
    _randomize(mlp, rng)
    _check_network(mlp, rng.normal(size=(3, 8)), np.array([0, 2, 3]), l2=1e-2)
    # whole CNN
    cnn = build_cnn(16, filters=2, kernel_size=3, pool_size=3, fc_units=4, n_classes=4)
    _randomize(cnn, rng)
    _check_network(cnn, rng.normal(size=(3, 16)), np.array([1, 2, 3]), l2=1e-2)

    assert time.perf_counter() - start < 60.0


# -- 5: loss sanity and memorisation --------------------------------------------------------

@criterion(5, "fresh-model loss is ln 256; 256 noiseless traces memorised within 100 epochs")
def test_loss_sanity_and_memorisation():
    data = synth_dataset(desk_config(1, 256, 512, noise_sigma=0.0))
    assert np.array_equal(np.sort(data.key_bytes), np.arange(256))
    net = init("mlp", data.n_samples, seed=0)
    report = train(net, data, None, TrainConfig(epochs=100, batch_size=64))
    assert abs(report.initial_loss - math.log(256)) <= 0.01
    assert max(report.train_accuracy) == 1.0
    assert net.accuracy(data.samples, data.key_bytes) == 1.0


# -- 6: CPA ------------------------------------------------------------------------------

def _cpa_dataset(noise, n_traces, seed, key=0x2B):
    profile = DeviceProfile(1, noise_sigma=noise, leak_positions=(96, 148), leak_strength=1.0)
    cfg = SynthConfig([profile], n_traces_per_device=n_traces, trace_length=300,
                      vary="plaintext", fixed_key_byte=key, seed=seed)
    return synth_dataset(cfg)


@criterion(6, "CPA: |rho| = 1 noiseless; rank 1 in >= 19/20 runs at sigma = 0.5 * strength")
def test_cpa_recovery():
    start = time.perf_counter()
    key = 0x2B
    res = cpa(_cpa_dataset(0.0, 256, 0, key))
    assert res.rank_of(key) == 1
    assert abs(res.scores[key] - 1.0) <= 1e-9
    assert abs(abs(res.correlations[key, 96]) - 1.0) <= 1e-9

    hits = sum(cpa(_cpa_dataset(0.5, 1000, seed, key)).rank_of(key) == 1 for seed in range(20))
    assert hits >= 19
    assert time.perf_counter() - start < 120.0


# -- 7, 8: cross-device reproductions --------------------------------------------------------

@criterion(7, "cross-device ordering: PCA-MLP(j=4) >= PCA-MLP(j=1) >= MLP(j=1); min PCA-MLP(4) > MLP(4)")
def test_cross_device_ordering():
    start = time.perf_counter()
    base = PipelineConfig(method="MLP")
    base.train.epochs = 100
    data = load_dataset(base)
    mlp = with_changes(base, method="MLP")
    pca_mlp = with_changes(base, method="PCA-MLP", pca_components=32)
    mlp1 = cross_matrix(mlp, form_groups(1, 5), data)
    mlp4 = cross_matrix(mlp, form_groups(4, 5), data)
    pca1 = cross_matrix(pca_mlp, form_groups(1, 5), data)
    pca4 = cross_matrix(pca_mlp, form_groups(4, 5), data)
    print(f"MLP j=1 avg {mlp1.avg:.4f}  j=4 avg {mlp4.avg:.4f} min {mlp4.min:.4f}")
    print(f"PCA-MLP j=1 avg {pca1.avg:.4f}  j=4 avg {pca4.avg:.4f} min {pca4.min:.4f}")
    assert pca4.avg >= pca1.avg >= mlp1.avg
    assert pca4.min > mlp4.min
    assert time.perf_counter() - start < 15 * 60


@criterion(8, "DTW rescue: misaligned MLP/PCA-MLP < 5x chance; DTW-PCA-MLP within 2 points of aligned")
def test_dtw_rescue():
    start = time.perf_counter()
    cfg = PipelineConfig(method="PCA-MLP", pca_components=32)
    cfg.train.epochs = 100
    group = form_groups(4, 5)
    aligned = cross_matrix(cfg, group, load_dataset(cfg))
    shifted_cfg = with_changes(cfg, max_shift=50)
    shifted = load_dataset(shifted_cfg)
    mis_mlp = cross_matrix(with_changes(shifted_cfg, method="MLP", pca_components=None), group, shifted)
    mis_pca = cross_matrix(shifted_cfg, group, shifted)
    rescued = cross_matrix(with_changes(shifted_cfg, method="DTW-PCA-MLP"), group, shifted)
    print(f"aligned PCA-MLP {aligned.avg:.4f}; misaligned MLP {mis_mlp.avg:.4f}, "
          f"PCA-MLP {mis_pca.avg:.4f}, DTW-PCA-MLP {rescued.avg:.4f}")
    assert mis_mlp.avg < 5 * CHANCE
    assert mis_pca.avg < 5 * CHANCE
    assert rescued.avg >= aligned.avg - 0.02
    assert time.perf_counter() - start < 20 * 60


# -- 9, 10: DOM and templates --------------------------------------------------------------

@criterion(9, "DOM top-2 POIs equal the configured leak positions in 20/20 runs")
def test_dom_recovers_leak_positions():
    for seed in range(20):
        profile = DeviceProfile(1, noise_sigma=0.5, leak_positions=(96, 148))
        cfg = SynthConfig([profile], n_traces_per_device=2560, trace_length=3000, seed=seed)
        poi = dom_poi(synth_dataset(cfg), 2)
        assert set(poi.indices.tolist()) == {96, 148}


@criterion(10, "noiseless templates confuse only equal-HW classes (lowest class wins ties)")
def test_template_confusion_structure():
    cfg = SynthConfig([DeviceProfile(1), DeviceProfile(2)], n_traces_per_device=768,
                      trace_length=300, seed=5)
    data = synth_dataset(cfg)
    train_set, test_set = data.for_devices([1]), data.for_devices([2])
    poi = dom_poi(train_set, 2)
    assert set(poi.indices.tolist()) == {96, 148}
    templates = fit_templates(train_set, poi)
    pred = template_attack(templates, test_set)
    conf = confusion_matrix(test_set.key_bytes, pred)

    hw = HW_TABLE[SBOX[np.arange(256) ^ cfg.fixed_plaintext_byte]]
    lowest = np.array([np.flatnonzero(hw == hw[k])[0] for k in range(256)])
    for k in range(256):
        row = conf[k]
        assert row.sum() == 3
        # every prediction lies in the true class's HW group ...
        assert np.all(hw[np.flatnonzero(row)] == hw[k])
        # ... and is the tie winner of that group
        assert row[lowest[k]] == 3
        if np.sum(hw == hw[k]) == 1:
            assert row[k] == 3


# -- 11: determinism ----------------------------------------------------------------------

@criterion(11, "two identical pipeline runs emit byte-identical report files")
def test_reports_are_deterministic(tmp_path):
    cfg = PipelineConfig(method="DTW-PCA-MLP", n_devices=3, traces_per_device=512,
                         trace_length=160, max_shift=8, pca_components=12)
    cfg.train.epochs = 3
    paths = []
    for run in ("a", "b"):
        report = cross_matrix(cfg, form_groups(1, 3))
        paths.append(report_emit(report, tmp_path / run))
    for a, b in zip(*paths):
        assert filecmp.cmp(a, b, shallow=False), a.name
        assert a.read_bytes() == b.read_bytes()


# -- 12: group formula -----------------------------------------------------------------------

@criterion(12, "form_groups(4, 30) gives the 7 consecutive quadruples D1-D4 .. D25-D28")
def test_group_formula():
    groups = form_groups(4, 30)
    assert [g.members for g in groups] == [tuple(range(k, k + 4)) for k in range(1, 29, 4)]
    assert [g.index for g in groups] == list(range(1, 8))
    assert groups[0].label == "D1-D4" and groups[-1].label == "D25-D28"

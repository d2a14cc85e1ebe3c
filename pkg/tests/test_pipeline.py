import math

import numpy as np
import pytest

from crossdev_sca import pipeline
from crossdev_sca.attacks import DeviceGroup, form_groups
from crossdev_sca.io import read_model
from crossdev_sca.nn import TrainConfig
from crossdev_sca.pipeline import PipelineConfig, PipelineConfigError

SMALL = dict(n_devices=5, traces_per_device=64, trace_length=160, mlp_hidden=(16, 16),
             train=TrainConfig(epochs=2, batch_size=32))


@pytest.fixture(scope="module")
def small_data():
    return pipeline.load_dataset(PipelineConfig(**SMALL))


def test_config_round_trip():
    cfg = PipelineConfig(method="DTW-PCA-MLP", pca_components=12, max_shift=5, train_devices=(2, 4),
                         mlp_hidden=(8, 4), dtw_band=7, train=TrainConfig(epochs=3, shuffle=False))
    back = pipeline.parse_config(pipeline.format_config(cfg))
    assert back == cfg
    assert pipeline.parse_config("# defaults\n") == PipelineConfig()


@pytest.mark.parametrize("text,match", [
    ("method=RNN", "unknown method"),
    ("method=MLP\npca_components=10", "no PCA stage"),
    ("method=PCA-MLP\nedge_trim=3", "no DTW stage"),
    ("colour=blue", "unknown key"),
    ("epochs=abc", "bad value"),
    ("batch_size=0", "batch_size"),
    ("train_fraction=1.5", "train_fraction"),
    ("dtw_mode=sideways", "dtw_mode"),
])
def test_config_errors(text, match):
    with pytest.raises(PipelineConfigError, match=match):
        pipeline.parse_config(text)


def test_with_changes_routes_training_keys():
    cfg = pipeline.with_changes(PipelineConfig(), method="MLP", epochs=7)
    assert cfg.method == "MLP" and cfg.train.epochs == 7
    assert PipelineConfig().train.epochs != 7


def test_training_group_resolution():
    cfg = PipelineConfig(group_size=2, group_index=2)
    assert pipeline.training_group(cfg, [10, 20, 30, 40, 50]).members == (30, 40)
    with pytest.raises(PipelineConfigError):
        pipeline.training_group(PipelineConfig(group_size=2, group_index=3), [1, 2, 3, 4, 5])
    with pytest.raises(PipelineConfigError):
        pipeline.training_group(PipelineConfig(train_devices=(9,)), [1, 2])


def test_cross_matrix_single_device_groups(small_data, tmp_path):
    cfg = PipelineConfig(method="PCA-MLP", pca_components=8, **SMALL)
    rep = pipeline.cross_matrix(cfg, form_groups(1, 5), small_data)
    assert rep.accuracy.shape == (5, 5)
    np.testing.assert_array_equal(rep.excluded, np.eye(5, dtype=bool))
    assert (~rep.excluded).sum() == 20
    cells = rep.accuracy[~rep.excluded]
    assert rep.avg == pytest.approx(cells.mean()) and rep.max == cells.max() and rep.min == cells.min()
    assert np.all((rep.accuracy >= 0) & (rep.accuracy <= 1))
    assert set(rep.same_device()) == {(i, i) for i in range(1, 6)}

    paths = pipeline.report_emit(rep, tmp_path)
    labels, devices, values = pipeline.read_matrix_csv(paths[0])
    assert labels == ["D1", "D2", "D3", "D4", "D5"] and devices == [1, 2, 3, 4, 5]
    assert np.all(np.isnan(np.diag(values)))
    np.testing.assert_array_equal(values[~rep.excluded], rep.accuracy[~rep.excluded])
    summary = paths[1].read_text().splitlines()
    assert summary[0] == "method,n_train_devices,avg,max,min"
    assert summary[1].startswith("PCA-MLP,1,")
    assert len(paths[2].read_text().splitlines()) == 1 + 25


def test_preprocessor_width_and_no_leakage(small_data):
    cfg = PipelineConfig(method="DTW-PCA-MLP", pca_components=6, max_shift=4, **SMALL)
    train_set = small_data.for_devices([2])
    pre, x = pipeline.fit_preprocessor(cfg, train_set)
    assert x.shape == (64, 6)
    assert pre.reference.size == 160
    # the front end depends only on its training data
    again, _ = pipeline.fit_preprocessor(cfg, train_set)
    np.testing.assert_array_equal(pre.pca.components, again.pca.components)
    other = small_data.for_devices([3])
    assert pre.transform(other.samples).shape == (64, 6)
    assert pre.warp(other.samples).shape == (64, 160 - 8)


def test_run_saves_usable_model(small_data, tmp_path):
    cfg = PipelineConfig(method="DTW-PCA-MLP", pca_components=6, max_shift=3, group_index=2, **SMALL)
    rep = pipeline.run(cfg, small_data, model_out=tmp_path / "m.scan")
    assert [g.members for g in rep.groups] == [(2,)]
    net, p, ref, meta = read_model(tmp_path / "m.scan")
    assert p.p == 6 and ref.size == 160 and meta["trim"] == 3
    pre = pipeline.Preprocessor(reference=ref, pca=p, trim=meta["trim"], band=meta["band"],
                                normalize=meta["normalize"])
    d3 = small_data.for_devices([3])
    acc = net.accuracy(pre.transform(d3.samples), d3.key_bytes)
    assert acc == pytest.approx(rep.accuracy[0, 2])


def test_leave_one_out_groups(small_data):
    cfg = PipelineConfig(method="MLP", **SMALL)
    rep = pipeline.leave_one_out(cfg, small_data.for_devices([1, 2, 3]))
    assert [g.members for g in rep.groups] == [(2, 3), (1, 3), (1, 2)]
    np.testing.assert_array_equal(~rep.excluded, np.eye(3, dtype=bool))


def test_bad_group_reference(small_data):
    with pytest.raises(PipelineConfigError):
        pipeline.cross_matrix(PipelineConfig(method="MLP", **SMALL), [DeviceGroup(1, (6,))], small_data)


def test_same_device_attack_learns():
    cfg = PipelineConfig(method="PCA-MLP", pca_components=16, n_devices=1, traces_per_device=2560,
                         trace_length=300, train=TrainConfig(epochs=30))
    rep = pipeline.run(cfg)
    same = rep.same_device()[(1, 1)]
    assert same > 0.9
    assert math.isnan(rep.avg)

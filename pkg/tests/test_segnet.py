import numpy as np
import pytest

from calcpheno import phantom as ph
from calcpheno.metrics import confusion, dsc
from calcpheno.segnet import (FEATURE_NAMES, ConvExtractor, SegmentationError, SegmentationModel,
                              TrainConfig, apply_foreground_filter, extract_features,
                              fit_threshold_baseline, segment_slices, split_train_val,
                              threshold_segment, train_framework, train_stage, uniform_subset)
from calcpheno.segnet.convnet import N_PARAMS, bce_loss_grad
from calcpheno.volgrid import BinaryMask, SliceAnnotation, VoxelVolume

TINY = dict(hidden=24, extractor_iters=8, pixel_cap=3000, val_pixel_cap=3000, patience_sample=4,
            patience_lipid=4, max_epochs=25)


@pytest.fixture(scope="module")
def trained(small_phantom):
    anns = small_phantom.annotations(ph.annotated_slices(128))
    cfg = TrainConfig(anns[0::2], **TINY)
    return small_phantom, anns, train_framework(small_phantom.volume, cfg)


def test_split_alternates():
    anns = [SliceAnnotation(z, np.ones((2, 2), bool), np.zeros((2, 2), bool)) for z in (9, 1, 5, 3)]
    tr, va = split_train_val(anns)
    assert [a.z for a in tr] == [1, 5] and [a.z for a in va] == [3, 9]
    with pytest.raises(ValueError):
        split_train_val(anns[:1])
    assert [a.z for a in uniform_subset(anns, 3)] == [1, 5, 9]


def test_features_layout(small_phantom):
    ex = ConvExtractor.init(seed=0)
    X = extract_features(small_phantom.volume, ex, 10)
    assert X.shape == (128 * 128, len(FEATURE_NAMES))
    assert X[:, 0].min() >= 0 and X[:, 0].max() <= 1
    assert set(np.unique(X[:, 1])) <= {0.0, 1.0}
    np.testing.assert_allclose(X[1, 2], 1 / 128)
    np.testing.assert_allclose(X[:, 4], 10 / 128)
    r = np.zeros((128, 128), bool)
    r[5, 7] = True
    row = extract_features(small_phantom.volume, ex, 10, restrict=r)
    np.testing.assert_allclose(row[0], X[5 * 128 + 7])
    with pytest.raises(IndexError):
        extract_features(small_phantom.volume, ex, 128)


def test_conv_gradient():
    rng = np.random.default_rng(0)
    ex = ConvExtractor.init(seed=1)
    assert ex.theta.size == N_PARAMS
    img = [rng.random((10, 9))]
    tgt = [rng.random((10, 9)) > 0.5]
    w = (1.0, 1.0)
    f, g = bce_loss_grad(ex.theta, img, tgt, w)
    h = 1e-6
    for i in rng.choice(N_PARAMS, 25, replace=False):
        e = np.zeros(N_PARAMS)
        e[i] = h
        fd = (bce_loss_grad(ex.theta + e, img, tgt, w)[0] - bce_loss_grad(ex.theta - e, img, tgt, w)[0]) / (2 * h)
        assert abs(fd - g[i]) <= 1e-4 * max(1e-6, abs(fd) + abs(g[i]))


def test_foreground_filter():
    pred = np.zeros((3, 3), bool)
    pred[1, 2] = True
    yy, xx = apply_foreground_filter(np.zeros((3, 3)), pred)
    assert list(zip(yy, xx)) == [(1, 2)]
    with pytest.raises(ValueError):
        apply_foreground_filter(np.zeros((3, 4)), pred)


def test_trained_quality_and_nesting(trained):
    p, anns, model = trained
    res = segment_slices(model, p.volume, [a.z for a in anns[1::2]])
    s = np.mean([dsc(confusion(res[a.z][0], a.sample_mask)).value for a in anns[1::2]])
    assert s > 0.9
    for z, (smp, lip) in res.items():
        assert not (lip & ~smp).any()
    assert model.sample.best_epoch <= model.sample.epochs_run


def test_threads_identical(trained):
    p, anns, model = trained
    zs = list(range(0, 128, 16))
    a = segment_slices(model, p.volume, zs, threads=1)
    b = segment_slices(model, p.volume, zs, threads=3)
    for z in zs:
        assert (a[z][0] == b[z][0]).all() and (a[z][1] == b[z][1]).all()


def test_model_roundtrip(trained, tmp_path):
    p, anns, model = trained
    model.save(tmp_path / "m")
    back = SegmentationModel.load(tmp_path / "m")
    for z in (40, 70):
        a = segment_slices(model, p.volume, [z])[z]
        b = segment_slices(back, p.volume, [z])[z]
        assert (a[0] == b[0]).all() and (a[1] == b[1]).all()


def test_missing_class_raises(small_phantom):
    vol = small_phantom.volume
    empty = np.zeros((128, 128), bool)
    anns = [SliceAnnotation(z, empty, empty) for z in (10, 20, 30)]
    with pytest.raises(SegmentationError, match="absent"):
        train_stage(vol, TrainConfig(anns, **TINY), "sample")


def test_lipid_needs_foreground(small_phantom):
    anns = small_phantom.annotations([10, 20, 30])
    cfg = TrainConfig(anns, **TINY)
    with pytest.raises(SegmentationError, match="no foreground"):
        train_stage(small_phantom.volume, cfg, "lipid",
                    foreground={a.z: np.zeros((128, 128), bool) for a in anns})


def test_threshold_segment_semantics():
    v = VoxelVolume(np.array([[[0.2, 0.7, 0.71]]], np.float32), 1.0)
    assert threshold_segment(v, 0.7).bits.tolist() == [[[False, False, True]]]
    assert threshold_segment(v, 1.0).count() == 0
    with pytest.raises(ValueError):
        threshold_segment(v, 1.5)


def test_baseline_fit(small_phantom):
    anns = small_phantom.annotations(ph.annotated_slices(128))
    bl = fit_threshold_baseline(small_phantom.volume, anns[0::2])
    assert ph.BACKGROUND < bl.t_sample < ph.TISSUE
    assert ph.LIPID < bl.t_lipid < ph.TISSUE

import numpy as np
import pytest

from tumorgraph import autodiff as ad
from tumorgraph.errors import ConsistencyError, ShapeError
from tumorgraph.refine import (BACKGROUND_LOGITS, CnnConfig, PatchBounds, RefineCase, RefineCNN, argmax_high,
                               cnn_forward, merge_predictions, predicted_labels, reproject_logits, train_cnn,
                               tumor_patch)
from tumorgraph.supervoxel import SupervoxelPartition


def test_reproject_paints_supervoxels():
    a = np.full((3, 3, 3), -1)
    a[0] = 0
    a[1] = 1
    logits = np.array([[1.0, 2, 3, 4], [5, 6, 7, 8]])
    out = reproject_logits(logits, SupervoxelPartition(a, 2, 0.5))
    np.testing.assert_array_equal(out[:, 0, 1, 2], logits[0])
    np.testing.assert_array_equal(out[:, 1, 2, 0], logits[1])
    np.testing.assert_array_equal(out[:, 2, 0, 0], BACKGROUND_LOGITS)


def test_reproject_count_mismatch():
    with pytest.raises(ConsistencyError):
        reproject_logits(np.zeros((3, 4)), SupervoxelPartition(np.zeros((2, 2, 2)), 1, 0.5))


def test_argmax_ties_go_high():
    assert argmax_high(np.array([[1.0], [1.0], [0.0], [1.0]]))[0] == 3
    assert argmax_high(np.array([[2.0], [1.0], [0.0], [1.0]]))[0] == 0


def test_patch_bounds_clip_and_margin():
    lv = np.zeros((4, 20, 20, 20), np.float32)
    lv[0] = 1
    lv[2, 2, 10, 15] = 5
    b = tumor_patch(lv, margin=3)
    assert b == PatchBounds((0, 7, 12), (5, 13, 18))
    assert b.shape == (6, 7, 7)
    assert tumor_patch(lv, margin=30) == PatchBounds((0, 0, 0), (19, 19, 19))
    lv[2] = 0
    assert tumor_patch(lv) is None


def test_predicted_labels_respects_mask():
    lv = np.zeros((4, 2, 2, 2), np.float32)
    lv[1] = 1
    mask = np.zeros((2, 2, 2), bool)
    mask[0] = True
    pred = predicted_labels(lv, mask)
    assert pred[0].tolist() == [[1, 1], [1, 1]] and not pred[1].any()


def test_merge_touches_only_the_patch(rng):
    gnn_pred = rng.integers(0, 4, (10, 10, 10)).astype(np.int8)
    b = PatchBounds((2, 3, 4), (5, 6, 8))
    logits = rng.standard_normal((4,) + b.shape)
    out = merge_predictions(gnn_pred, logits, b)
    outside = np.ones_like(gnn_pred, bool)
    outside[b.slices] = False
    np.testing.assert_array_equal(out[outside], gnn_pred[outside])
    np.testing.assert_array_equal(out[b.slices], argmax_high(logits))
    with pytest.raises(ShapeError):
        merge_predictions(gnn_pred, logits[:, :-1], b)
    np.testing.assert_array_equal(merge_predictions(gnn_pred, None, None), gnn_pred)


def test_cnn_preserves_spatial_shape(rng):
    model = RefineCNN(CnnConfig(), rng)
    out = cnn_forward(model, rng.standard_normal((4, 6, 7, 8)).astype(np.float32),
                      rng.standard_normal((4, 6, 7, 8)).astype(np.float32))
    assert out.shape == (4, 6, 7, 8)


def test_cnn_gradient(rng):
    from tumorgraph.gradcheck import check_parameters

    with ad.precision(np.float64):
        model = RefineCNN(CnnConfig(), rng)
        x = rng.standard_normal((8, 8, 8, 8))
        y = rng.integers(0, 4, 512)
        errs = check_parameters(lambda: ad.weighted_cross_entropy(ad.to_rows(model(x)), y),
                                model.parameters(), rng, per_param=4)
    assert max(errs.values()) < 1e-4, errs


def _toy_case(rng, shift=0):
    labels = np.zeros((12, 12, 12), np.int8)
    labels[4 + shift:8 + shift, 4:8, 4:8] = 2
    labels[5 + shift:7 + shift, 5:7, 5:7] = 3
    image = rng.normal(0, 0.05, (4, 12, 12, 12)).astype(np.float32) + (labels > 0) * 1.0 + (labels == 3) * 1.0
    lv = np.zeros((4, 12, 12, 12), np.float32)
    lv[0] = 1.0
    lv[2][labels > 0] = 2.0  # coarse prediction: the whole tumour as edema
    return RefineCase(lv, image.astype(np.float32), labels)


def test_cnn_training_learns_and_is_reproducible(rng):
    cases = [_toy_case(rng, s) for s in (0, 1, 2)]
    cfg = CnnConfig(epochs=6, lr0=0.01, crop_margin=2, seed=1)
    m1, l1 = train_cnn(cases, cfg)
    m2, l2 = train_cnn(cases, cfg)
    assert l1[-1] < l1[0]
    assert l1 == l2
    assert all(np.array_equal(p.data, m2.parameters()[k].data) for k, p in m1.parameters().items())


def test_cnn_training_without_tumour(rng, caplog):
    case = _toy_case(rng)
    case.logit_volume[1:] = 0
    model, losses = train_cnn([case], CnnConfig(epochs=2))
    assert losses == [] and "untrained" in caplog.text


def test_cnn_save_load(tmp_path, rng):
    model = RefineCNN(CnnConfig(seed=2), rng)
    model.save(tmp_path / "c.ckpt", epoch=3)
    back, meta = RefineCNN.load(tmp_path / "c.ckpt")
    assert meta["epoch"] == 3 and back.cfg == model.cfg
    for k, p in model.parameters().items():
        assert np.array_equal(back.parameters()[k].data, p.data)

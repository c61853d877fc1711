import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorgraph.errors import ConsistencyError, DataError, DegenerateInputError, FormatError, UsageError
from tumorgraph.phantom import generate_phantom, write_case
from tumorgraph.volume import (DatasetStats, LabelVolume, MultiModalVolume, case_paths, compute_dataset_stats,
                               crop_to_brain_bbox, destandardize, export_labels, load_case, rescale_by_percentile,
                               standardize, uncrop, write_nifti)


def _write_grids(tmp_path, grids, seg=None):
    paths = []
    for name, g in zip(("t1", "t1ce", "t2", "flair"), grids):
        p = tmp_path / f"x_{name}.nii.gz"
        write_nifti(p, g)
        paths.append(p)
    seg_path = None
    if seg is not None:
        seg_path = tmp_path / "x_seg.nii.gz"
        write_nifti(seg_path, seg)
    return paths, seg_path


def test_load_all_zero_case(tmp_path):
    paths, seg = _write_grids(tmp_path, [np.zeros((4, 4, 4), np.int16)] * 4, np.zeros((4, 4, 4), np.uint8))
    v, lab = load_case(paths, seg)
    assert v.data.shape == (4, 4, 4, 4) and v.data.dtype == np.float32
    assert not v.brain_mask.any()
    assert np.all(lab.labels == 0)


def test_bad_magic_is_format_error(tmp_path):
    paths, _ = _write_grids(tmp_path, [np.ones((4, 4, 4), np.float32)] * 4)
    raw = bytearray(gzip.decompress(paths[2].read_bytes()))
    raw[344:348] = b"XXXX"
    paths[2].write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_case(paths)


def test_garbage_file_is_format_error(tmp_path):
    paths, _ = _write_grids(tmp_path, [np.ones((4, 4, 4), np.float32)] * 4)
    paths[0].write_bytes(b"not an image at all")
    with pytest.raises(FormatError):
        load_case(paths)


def test_unsupported_dtype_is_format_error(tmp_path):
    paths, _ = _write_grids(tmp_path, [np.ones((4, 4, 4), np.float64)] + [np.ones((4, 4, 4), np.float32)] * 3)
    with pytest.raises(FormatError):
        load_case(paths)


def test_shape_mismatch_is_consistency_error(tmp_path):
    grids = [np.ones((4, 4, 4), np.float32)] * 3 + [np.ones((4, 4, 5), np.float32)]
    paths, _ = _write_grids(tmp_path, grids)
    with pytest.raises(ConsistencyError):
        load_case(paths)
    paths, seg = _write_grids(tmp_path, [np.ones((4, 4, 4), np.float32)] * 4, np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(ConsistencyError):
        load_case(paths, seg)


def test_label_remap_and_bad_label(tmp_path):
    seg = np.zeros((4, 4, 4), np.uint8)
    seg[0, 0, :4] = [0, 1, 2, 4]
    paths, seg_path = _write_grids(tmp_path, [np.ones((4, 4, 4), np.uint8)] * 4, seg)
    _, lab = load_case(paths, seg_path)
    np.testing.assert_array_equal(lab.labels[0, 0, :4], [0, 1, 2, 3])
    seg[1, 1, 1] = 3
    write_nifti(seg_path, seg)
    with pytest.raises(DataError):
        load_case(paths, seg_path)


def test_missing_file_is_data_error(tmp_path):
    paths, _ = _write_grids(tmp_path, [np.ones((4, 4, 4), np.float32)] * 4)
    paths[1].unlink()
    with pytest.raises(DataError):
        load_case(paths)


def test_phantom_round_trip_voxel_exact(tmp_path, small_spec):
    v, lab = generate_phantom(small_spec, 3)
    write_case(tmp_path / "c", "c", v, lab)
    images, seg = case_paths(tmp_path / "c")
    v2, lab2 = load_case(images, seg)
    np.testing.assert_array_equal(v2.data, v.data)
    np.testing.assert_array_equal(v2.brain_mask, v.brain_mask)
    np.testing.assert_array_equal(lab2.labels, lab.labels)


def test_nifti_writes_are_byte_identical(tmp_path, rng):
    g = rng.standard_normal((5, 6, 7)).astype(np.float32)
    write_nifti(tmp_path / "a.nii.gz", g)
    write_nifti(tmp_path / "b.nii.gz", g)
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


# ---------------------------------------------------------------- cropping


def test_crop_to_known_box():
    data = np.zeros((4, 10, 10, 10), np.float32)
    data[1, 2:6, 2:6, 2:6] = 1.0
    v, _ = crop_to_brain_bbox(MultiModalVolume.from_channels(data))
    assert v.shape == (4, 4, 4)
    assert v.origin_offset == (2, 2, 2)


def test_crop_full_volume_is_identity():
    v0 = MultiModalVolume.from_channels(np.ones((4, 5, 6, 7), np.float32))
    v, _ = crop_to_brain_bbox(v0)
    assert v.shape == (5, 6, 7) and v.origin_offset == (0, 0, 0)


def test_crop_empty_volume_raises():
    with pytest.raises(DegenerateInputError):
        crop_to_brain_bbox(MultiModalVolume.from_channels(np.zeros((4, 3, 3, 3), np.float32)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11), st.integers(0, 11)), min_size=1, max_size=20),
       st.integers(0, 2 ** 16))
def test_crop_label_alignment_and_mask_preservation(points, seed):
    rng = np.random.default_rng(seed)
    data = np.zeros((4, 12, 12, 12), np.float32)
    for p in points:
        data[(rng.integers(0, 4),) + p] = rng.uniform(0.5, 2.0)
    labels = LabelVolume(rng.integers(0, 4, (12, 12, 12)))
    v0 = MultiModalVolume.from_channels(data)
    v, lab = crop_to_brain_bbox(v0, labels)
    o = np.array(v.origin_offset)
    for idx in np.ndindex(*v.shape):
        src = tuple(np.array(idx) + o)
        assert lab.labels[idx] == labels.labels[src]
    shifted = {tuple(np.array(c) + o) for c in zip(*np.nonzero(v.brain_mask))}
    assert shifted == set(zip(*np.nonzero(v0.brain_mask)))
    # every boundary slab touches the brain
    for ax in range(3):
        assert np.take(v.brain_mask, 0, axis=ax).any() and np.take(v.brain_mask, -1, axis=ax).any()


# --------------------------------------------------------------- rescaling


def _brute_percentile(values, q):
    s = sorted(values)
    rank = q / 100 * (len(s) - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (rank - lo) * (s[hi] - s[lo])


def test_rescale_constant_channel_becomes_one():
    data = np.zeros((4, 5, 5, 5), np.float32)
    data[:, 1:4, 1:4, 1:4] = 200.0
    v = rescale_by_percentile(MultiModalVolume.from_channels(data))
    np.testing.assert_allclose(v.data[:, v.brain_mask], 1.0)


def test_rescale_divisor_matches_sorted_oracle():
    data = np.zeros((4, 10, 10, 10), np.float32)
    data[:] = np.arange(1, 1001, dtype=np.float32).reshape(10, 10, 10)
    divisor = _brute_percentile(list(range(1, 1001)), 99.5)
    assert divisor == pytest.approx(995.005, abs=1e-9)
    v = rescale_by_percentile(MultiModalVolume.from_channels(data))
    assert v.data[0].max() == pytest.approx(1000 / divisor, rel=1e-6)


def test_rescale_is_idempotent(rng):
    data = rng.uniform(1, 50, (4, 6, 6, 6)).astype(np.float32)
    once = rescale_by_percentile(MultiModalVolume.from_channels(data))
    twice = rescale_by_percentile(once)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e4), st.integers(0, 2 ** 16))
def test_rescale_positively_homogeneous(alpha, seed):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0, 10, (4, 5, 5, 5)).astype(np.float32)
    data[data < 2] = 0
    data[:, 2, 2, 2] = 5.0
    base = rescale_by_percentile(MultiModalVolume.from_channels(data))
    scaled = rescale_by_percentile(MultiModalVolume(data * np.float32(alpha), base.brain_mask))
    np.testing.assert_allclose(scaled.data, base.data, atol=1e-6, rtol=1e-5)
    np.testing.assert_array_equal(scaled.brain_mask, base.brain_mask)


def test_rescale_zero_channel_names_channel():
    data = np.ones((4, 3, 3, 3), np.float32)
    data[2] = 0
    with pytest.raises(DegenerateInputError, match="t2"):
        rescale_by_percentile(MultiModalVolume.from_channels(data))


# ---------------------------------------------------------- standardising


def test_standardize_identity_stats(rng):
    v = MultiModalVolume.from_channels(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    out = standardize(v, DatasetStats(np.zeros(4), np.ones(4), 1))
    np.testing.assert_array_equal(out.data, v.data)


def test_standardize_constant_to_zero():
    v = MultiModalVolume.from_channels(np.full((4, 3, 3, 3), 5.0, np.float32))
    out = standardize(v, DatasetStats(np.full(4, 5.0), np.full(4, 2.0), 1))
    np.testing.assert_array_equal(out.data, 0.0)


def test_standardize_round_trip(rng):
    v = MultiModalVolume.from_channels(rng.uniform(0, 3, (4, 5, 5, 5)).astype(np.float32))
    stats = DatasetStats(rng.uniform(-1, 1, 4), rng.uniform(0.5, 2, 4), 1)
    back = destandardize(standardize(v, stats), stats)
    np.testing.assert_allclose(back.data, v.data, atol=1e-5)


def test_stats_two_point():
    data = np.zeros((4, 2, 1, 1), np.float32)
    data[:, 0] = 1.0
    data[:, 1] = 3.0
    stats = compute_dataset_stats([MultiModalVolume.from_channels(data)])
    np.testing.assert_allclose(stats.mean, 2.0)
    np.testing.assert_allclose(stats.std, 1.0)


def test_stats_duplicate_invariance(small_spec):
    v, _ = generate_phantom(small_spec, 5)
    a = compute_dataset_stats([v])
    b = compute_dataset_stats([v, v])
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)
    np.testing.assert_allclose(a.std, b.std, rtol=1e-12)


def test_stats_match_flat_concatenation_oracle(small_spec):
    vols = [rescale_by_percentile(generate_phantom(small_spec, s)[0]) for s in range(5)]
    stats = compute_dataset_stats(vols)
    for c in range(4):
        flat = np.concatenate([v.data[c][v.data[c] != 0] for v in vols]).astype(np.float64)
        assert stats.mean[c] == pytest.approx(flat.mean(), abs=1e-6)
        assert stats.std[c] == pytest.approx(flat.std(), abs=1e-6)


def test_stats_empty_corpus():
    with pytest.raises(UsageError):
        compute_dataset_stats([])


def test_corpus_standardised_to_unit_moments(small_spec):
    vols = [rescale_by_percentile(crop_to_brain_bbox(generate_phantom(small_spec, s)[0])[0]) for s in range(10)]
    stats = compute_dataset_stats(vols)
    out = [standardize(v, stats) for v in vols]
    for c in range(4):
        pooled = np.concatenate([o.data[c][v.data[c] != 0] for o, v in zip(out, vols)]).astype(np.float64)
        assert abs(pooled.mean()) < 1e-4
        assert abs(pooled.std() - 1) < 1e-3


def test_export_and_uncrop():
    lab = np.array([[[0, 1], [2, 3]]], dtype=np.int8)
    np.testing.assert_array_equal(export_labels(lab), [[[0, 1], [2, 4]]])
    full = uncrop(lab, (1, 0, 2), (3, 2, 5))
    assert full.shape == (3, 2, 5)
    np.testing.assert_array_equal(full[1:2, 0:2, 2:4], lab)
    assert full.sum() == lab.sum()

import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from conftest import two_tone_volume
from tumorgraph.errors import DegenerateInputError, FormatError
from tumorgraph.supervoxel import (SupervoxelPartition, achievable_segmentation_accuracy, load_partition,
                                   save_partition, slic_grid_search, slic_partition)
from tumorgraph.volume import LabelVolume, MultiModalVolume

FACE = ndimage.generate_binary_structure(3, 1)


def check_partition(p: SupervoxelPartition, mask: np.ndarray):
    """Coverage, disjointness and 6-connectivity, each checked from scratch."""
    a = p.assignment
    assert np.all((a >= 0) == mask), "coverage"
    ids = np.unique(a[a >= 0])
    np.testing.assert_array_equal(ids, np.arange(len(ids)))
    # one ID per voxel makes overlaps impossible; the counts must add up too
    assert sum(len(c) for _, c in p.supervoxels) == int(mask.sum())
    for i in ids:
        _, n = ndimage.label(a == i, structure=FACE)
        assert n == 1, f"supervoxel {i} has {n} components"


def asa_oracle(a, labels):
    counts = Counter(zip(a[a >= 0].tolist(), labels[a >= 0].tolist()))
    best = {}
    for (s, _), c in counts.items():
        best[s] = max(best.get(s, 0), c)
    return sum(best.values()) / int((a >= 0).sum())


def test_two_tone_volume_is_separated():
    v, lab = two_tone_volume()
    p = slic_partition(v, 8, 0.5)
    check_partition(p, v.brain_mask)
    assert achievable_segmentation_accuracy(p, lab) == 1.0


def test_single_supervoxel():
    v, _ = two_tone_volume((6, 6, 6))
    p = slic_partition(MultiModalVolume(np.ones_like(v.data), v.brain_mask), 1, 0.5)
    assert p.n_supervoxels == 1


def test_k_above_voxel_count_is_clamped(caplog):
    data = np.zeros((4, 5, 5, 5), np.float32)
    data[:, 1:3, 1:3, 1:3] = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    v = MultiModalVolume(data, data[0] != 0)
    v.brain_mask[1:3, 1:3, 1:3] = True
    with caplog.at_level(logging.WARNING):
        p = slic_partition(v, 100, 0.5)
    assert "clamping" in caplog.text
    check_partition(p, v.brain_mask)
    assert p.n_supervoxels <= 8


def test_empty_mask():
    v = MultiModalVolume(np.zeros((4, 3, 3, 3), np.float32), np.zeros((3, 3, 3), bool))
    with pytest.raises(DegenerateInputError):
        slic_partition(v, 2, 0.5)


def test_phantom_partition_invariants(small_cases):
    for v, lab in small_cases:
        p = slic_partition(v, 64, 0.5)
        check_partition(p, v.brain_mask)
        assert 32 <= p.n_supervoxels <= 128
        assert achievable_segmentation_accuracy(p, lab) == pytest.approx(
            asa_oracle(p.assignment, lab.labels), abs=1e-12)


def test_deterministic(small_cases):
    v, _ = small_cases[0]
    a = slic_partition(v, 80, 0.5).assignment
    b = slic_partition(v, 80, 0.5).assignment
    np.testing.assert_array_equal(a, b)


# -------------------------------------------------------------------- ASA


def test_asa_singletons_are_perfect(rng):
    labels = rng.integers(0, 4, (5, 5, 5))
    p = SupervoxelPartition(np.arange(125).reshape(5, 5, 5), 125, 0.5)
    assert achievable_segmentation_accuracy(p, LabelVolume(labels)) == 1.0


def test_asa_single_region_is_majority_fraction():
    labels = np.zeros((4, 4, 4), np.int8)
    labels[:1] = 2
    p = SupervoxelPartition(np.zeros((4, 4, 4)), 1, 0.5)
    assert achievable_segmentation_accuracy(p, LabelVolume(labels)) == 0.75


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_asa_split_monotone_and_oracle(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, (6, 6, 6))
    a = rng.integers(0, 5, (6, 6, 6))
    a[rng.random((6, 6, 6)) < 0.2] = -1
    a[0, 0, 0] = 0
    # relabel contiguously so IDs are 0..n-1
    _, a_inside = np.unique(a[a >= 0], return_inverse=True)
    a[a >= 0] = a_inside
    p = SupervoxelPartition(a, 5, 0.5)
    base = achievable_segmentation_accuracy(p, LabelVolume(labels))
    assert base == pytest.approx(asa_oracle(a, labels), abs=1e-12)
    target = rng.integers(0, p.n_supervoxels)
    split = a.copy()
    members = split == target
    split[members & (rng.random(a.shape) < 0.5)] = p.n_supervoxels
    after = achievable_segmentation_accuracy(SupervoxelPartition(split, 5, 0.5), LabelVolume(labels))
    assert after >= base - 1e-12


def test_grid_search_prefers_smaller_k_and_m_on_ties():
    case = two_tone_volume()
    res = slic_grid_search([case], [16, 8], [1.0, 0.5], max_iter=5)
    assert [r[:2] for r in res.table] == [(8, 0.5), (8, 1.0), (16, 0.5), (16, 1.0)]
    assert all(r[2] == 1.0 for r in res.table)
    assert res.best == (8, 0.5)


# ---------------------------------------------------------- serialisation


def test_partition_round_trip(tmp_path, small_cases):
    p = slic_partition(small_cases[0][0], 40, 0.5)
    save_partition(tmp_path / "p.svp", p)
    q = load_partition(tmp_path / "p.svp")
    np.testing.assert_array_equal(q.assignment, p.assignment)
    assert (q.k_requested, q.m, q.grid_step, q.iterations) == (p.k_requested, p.m, p.grid_step, p.iterations)


def test_partition_bad_magic(tmp_path):
    (tmp_path / "x.svp").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        load_partition(tmp_path / "x.svp")

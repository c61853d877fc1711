import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumorgraph.errors import SpecError
from tumorgraph.phantom import PhantomSpec, case_seeds, generate_dataset, generate_phantom, read_manifest


def test_nesting_and_background(small_spec):
    v, lab = generate_phantom(small_spec, 1)
    l = lab.labels
    assert set(np.unique(l)) == {0, 1, 2, 3}
    assert np.all(v.data[:, ~v.brain_mask] == 0)
    assert np.all(v.data[:, v.brain_mask] > 0)
    assert not np.any((l > 0) & ~v.brain_mask)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_regions_nest_for_any_seed(seed):
    spec = PhantomSpec(shape=(32, 32, 32), brain_radii=(13.0, 11.0, 12.0), edema_radius_range=(4.0, 6.0))
    _, lab = generate_phantom(spec, seed)
    l = lab.labels
    et, tc, wt = l == 3, np.isin(l, (1, 3)), l > 0
    assert np.all(tc[et]) and np.all(wt[tc])
    assert et.any()


def test_same_seed_same_phantom(small_spec):
    a = generate_phantom(small_spec, 9)
    b = generate_phantom(small_spec, 9)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].labels, b[1].labels)
    c = generate_phantom(small_spec, 10)
    assert not np.array_equal(a[0].data, c[0].data)


def test_case_seeds_are_stable():
    assert case_seeds(3, 4) == case_seeds(3, 4)
    assert case_seeds(3, 4)[:2] == case_seeds(3, 2)
    assert len(set(case_seeds(3, 50))) == 50


def test_intensity_contrasts(small_spec):
    v, lab = generate_phantom(PhantomSpec(**{**small_spec.__dict__, "noise_std": 0.0, "gain_range": (1, 1)}), 2)
    l = lab.labels
    inside = v.brain_mask
    t1ce = v.data[1]
    assert t1ce[(l == 3) & inside].mean() > t1ce[(l == 0) & inside].mean()
    flair = v.data[3]
    assert flair[(l == 2) & inside].mean() > flair[(l == 0) & inside].mean()


def test_spec_validation():
    with pytest.raises(SpecError):
        PhantomSpec(core_ratio=0.3, enhancing_ratio=0.5)
    with pytest.raises(SpecError):
        PhantomSpec(noise_std=-1)
    with pytest.raises(SpecError):
        PhantomSpec(intensities=((1, 1, 1, 1),) * 3)


def test_dataset_layout(tmp_path, small_spec):
    rows = generate_dataset(small_spec, 2, 1, 5, tmp_path)
    assert rows == [("Phantom_00000", "train"), ("Phantom_00001", "train"), ("Phantom_00002", "val")]
    assert read_manifest(tmp_path / "manifest.txt") == rows
    files = sorted(p.name for p in (tmp_path / "Phantom_00002").iterdir())
    assert files == sorted(f"Phantom_00002_{m}.nii.gz" for m in ("t1", "t1ce", "t2", "flair", "seg"))
    first = (tmp_path / "Phantom_00000" / "Phantom_00000_t1.nii.gz").read_bytes()
    generate_dataset(small_spec, 2, 1, 5, tmp_path / "again")
    assert (tmp_path / "again" / "Phantom_00000" / "Phantom_00000_t1.nii.gz").read_bytes() == first

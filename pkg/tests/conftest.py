import numpy as np
import pytest

from tumorgraph.phantom import PhantomSpec, generate_phantom
from tumorgraph.volume import (LabelVolume, MultiModalVolume, compute_dataset_stats, crop_to_brain_bbox,
                               rescale_by_percentile, standardize)


@pytest.fixture
def rng():
    return np.random.default_rng(20211)


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(shape=(32, 32, 32), brain_radii=(13.0, 11.0, 12.0), edema_radius_range=(4.0, 6.0))


def preprocess(cases):
    staged = []
    for v, lab in cases:
        v, lab = crop_to_brain_bbox(v, lab)
        staged.append((rescale_by_percentile(v), lab))
    stats = compute_dataset_stats([v for v, _ in staged])
    return [(standardize(v, stats), lab) for v, lab in staged]


@pytest.fixture(scope="session")
def small_cases(small_spec):
    """Three preprocessed 32^3 phantoms."""
    return preprocess([generate_phantom(small_spec, s) for s in (11, 12, 13)])


def two_tone_volume(shape=(16, 16, 16)):
    data = np.zeros((4,) + shape, dtype=np.float32)
    data[:, shape[0] // 2:] = 1.0
    labels = np.zeros(shape, dtype=np.int8)
    labels[shape[0] // 2:] = 2
    return MultiModalVolume(data, np.ones(shape, dtype=bool)), LabelVolume(labels)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

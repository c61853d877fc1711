"""Synthetic four-channel brain phantoms with nested ellipsoidal tumours.

Label layout: 0 healthy brain, 2 edema shell, 1 necrotic core shell, 3
enhancing innermost ellipsoid.  All compartments share one centre and one
rotation, so ET is inside the core and the core is inside the edema exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SpecError
from .volume import MODALITIES, LabelVolume, MultiModalVolume, export_labels, write_nifti

# rows: healthy, necrotic, edema, enhancing; columns: T1, T1ce, T2, FLAIR
DEFAULT_INTENSITIES = (
    (0.60, 0.50, 0.45, 0.40),
    (0.35, 0.25, 0.80, 0.60),
    (0.50, 0.50, 0.75, 0.85),
    (0.55, 0.95, 0.65, 0.75),
)


@dataclass
class PhantomSpec:
    shape: tuple = (64, 64, 64)
    brain_radii: tuple = (28.0, 24.0, 26.0)
    brain_radius_jitter: float = 0.05
    edema_radius_range: tuple = (9.0, 13.0)
    core_ratio: float = 0.65
    enhancing_ratio: float = 0.35
    tumor_center: tuple | None = None  # random when None
    rotate: bool = True
    intensities: tuple = DEFAULT_INTENSITIES
    noise_std: float = 0.015
    gain_range: tuple = (200.0, 2000.0)  # raw scanner scale, removed by rescaling

    def __post_init__(self):
        if not (0 < self.enhancing_ratio < self.core_ratio < 1):
            raise SpecError("need 0 < enhancing_ratio < core_ratio < 1")
        table = np.asarray(self.intensities, dtype=float)
        if table.shape != (4, 4) or not np.all(np.isfinite(table)) or np.any(table <= 0):
            raise SpecError("intensity table must be 4x4, finite and positive")
        if self.noise_std < 0:
            raise SpecError("noise_std must be non-negative")


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def _quadratic_form(coords, center, radii, rot) -> np.ndarray:
    local = (coords - center) @ rot
    return np.square(local / radii).sum(axis=-1)


def phantom_geometry(spec: PhantomSpec, rng: np.random.Generator) -> dict:
    """Draw brain and tumour ellipsoid parameters for one case."""
    center = (np.asarray(spec.shape, dtype=float) - 1) / 2
    brain_radii = np.asarray(spec.brain_radii) * (1 + rng.uniform(-1, 1, 3) * spec.brain_radius_jitter)
    lo, hi = spec.edema_radius_range
    edema_radii = rng.uniform(lo, hi, 3)
    rot = _random_rotation(rng) if spec.rotate else np.eye(3)
    if spec.tumor_center is not None:
        tumor_center = np.asarray(spec.tumor_center, dtype=float)
    else:
        # uniform inside the brain shrunk by the largest tumour radius
        shrink = brain_radii - edema_radii.max() - 1.5
        if np.any(shrink <= 0):
            raise SpecError("tumour radii do not fit inside the brain")
        while True:
            u = rng.uniform(-1, 1, 3)
            if np.square(u).sum() <= 1:
                break
        tumor_center = center + u * shrink
    return {"brain_center": center, "brain_radii": brain_radii, "tumor_center": tumor_center,
            "edema_radii": edema_radii, "rotation": rot}


def label_grid(spec: PhantomSpec, geom: dict) -> tuple[np.ndarray, np.ndarray]:
    coords = np.stack(np.meshgrid(*[np.arange(n) for n in spec.shape], indexing="ij"), axis=-1).astype(float)
    brain = _quadratic_form(coords, geom["brain_center"], geom["brain_radii"], np.eye(3)) <= 1.0
    q = _quadratic_form(coords, geom["tumor_center"], geom["edema_radii"], geom["rotation"])
    labels = np.zeros(spec.shape, dtype=np.int8)
    labels[q <= 1.0] = 2
    labels[q <= spec.core_ratio ** 2] = 1
    labels[q <= spec.enhancing_ratio ** 2] = 3
    return brain, labels


def generate_phantom(spec: PhantomSpec, case_seed: int) -> tuple[MultiModalVolume, LabelVolume]:
    rng = np.random.default_rng(case_seed)
    geom = phantom_geometry(spec, rng)
    brain, labels = label_grid(spec, geom)
    if np.any((labels > 0) & ~brain):
        raise SpecError("tumour extends outside the brain")
    table = np.asarray(spec.intensities, dtype=np.float64)
    gain = rng.uniform(*spec.gain_range, size=4)
    data = np.zeros((4,) + tuple(spec.shape), dtype=np.float64)
    noise = rng.standard_normal(data.shape) * spec.noise_std
    for c in range(4):
        ch = table[labels, c] + noise[c]
        # keep tissue strictly positive so the nonzero mask is the brain
        ch = np.maximum(ch, 1e-3) * gain[c]
        data[c] = np.where(brain, ch, 0.0)
    volume = MultiModalVolume(data.astype(np.float32), brain)
    return volume, LabelVolume(np.where(brain, labels, 0))


def case_seeds(master_seed: int, n: int) -> list[int]:
    seq = np.random.SeedSequence(master_seed)
    return [int(s.generate_state(1, dtype=np.uint32)[0]) for s in seq.spawn(n)]


def write_case(case_dir, case_id: str, volume: MultiModalVolume, labels: LabelVolume | None) -> None:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    for c, mod in enumerate(MODALITIES):
        write_nifti(case_dir / f"{case_id}_{mod}.nii.gz", volume.data[c], spacing=volume.spacing)
    if labels is not None:
        write_nifti(case_dir / f"{case_id}_seg.nii.gz", export_labels(labels.labels), spacing=volume.spacing)


def generate_dataset(spec: PhantomSpec, n_train: int, n_val: int, master_seed: int, out_dir) -> list[tuple[str, str]]:
    """Write ``n_train + n_val`` phantom cases and a ``manifest.txt`` of (case ID, split)."""
    if n_train < 1 or n_val < 0:
        raise SpecError("need n_train >= 1 and n_val >= 0")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = case_seeds(master_seed, n_train + n_val)
    manifest = []
    for i, seed in enumerate(seeds):
        case_id = f"Phantom_{i:05d}"
        split = "train" if i < n_train else "val"
        volume, labels = generate_phantom(spec, seed)
        write_case(out_dir / case_id, case_id, volume, labels)
        manifest.append((case_id, split))
    write_manifest(out_dir / "manifest.txt", manifest)
    return manifest


def write_manifest(path, rows) -> None:
    Path(path).write_text("".join(f"{cid} {split}\n" for cid, split in rows))


def read_manifest(path) -> list[tuple[str, str]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            cid, split = line.split()
            rows.append((cid, split))
    return rows

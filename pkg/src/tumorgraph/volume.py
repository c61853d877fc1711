"""Multi-modal MRI volumes: NIfTI ingestion, export and intensity preprocessing."""
from __future__ import annotations

import gzip
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np

from .errors import ConsistencyError, DataError, DegenerateInputError, FormatError, UsageError

MODALITIES = ("t1", "t1ce", "t2", "flair")
ACCEPTED_DTYPES = (np.dtype(np.int16), np.dtype(np.uint8), np.dtype(np.float32))
RAW_LABELS = (0, 1, 2, 4)


@dataclass
class MultiModalVolume:
    data: np.ndarray  # (4, X, Y, Z) float32, channels in MODALITIES order
    brain_mask: np.ndarray  # (X, Y, Z) bool
    spacing: tuple = (1.0, 1.0, 1.0)
    origin_offset: tuple = (0, 0, 0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.brain_mask = np.asarray(self.brain_mask, dtype=bool)
        if self.data.ndim != 4:
            raise ConsistencyError(f"expected (C, X, Y, Z) data, got shape {self.data.shape}")
        if self.brain_mask.shape != self.data.shape[1:]:
            raise ConsistencyError(
                f"brain mask shape {self.brain_mask.shape} != spatial shape {self.data.shape[1:]}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin_offset = tuple(int(o) for o in self.origin_offset)

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    @classmethod
    def from_channels(cls, data, spacing=(1.0, 1.0, 1.0)) -> "MultiModalVolume":
        data = np.asarray(data, dtype=np.float32)
        return cls(data, np.any(data != 0, axis=0), spacing)


@dataclass
class LabelVolume:
    labels: np.ndarray  # (X, Y, Z) int, values in {0, 1, 2, 3}

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.ndim != 3:
            raise ConsistencyError(f"label grid must be 3-D, got {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 3):
            raise DataError("internal labels must lie in {0, 1, 2, 3}")

    @property
    def shape(self) -> tuple:
        return self.labels.shape


@dataclass
class DatasetStats:
    mean: np.ndarray
    std: np.ndarray
    n_cases: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise DegenerateInputError(f"non-positive channel std {self.std.tolist()}")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "n_cases": self.n_cases}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(d["mean"], d["std"], int(d["n_cases"]))


# ------------------------------------------------------------------------ I/O


def read_nifti(path) -> tuple[np.ndarray, nib.Nifti1Header]:
    """Read a NIfTI-1 file and return its grid and header.

    Raises :class:`FormatError` for anything that is not a little-endian
    NIfTI-1 single file holding int16, uint8 or float32 voxels.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream") from exc
    if len(raw) < 352 or raw[344:348] != b"n+1\x00":
        raise FormatError(f"{path}: not a single-file NIfTI-1 image (bad magic)")
    if int.from_bytes(raw[:4], "little") != 348:
        raise FormatError(f"{path}: only little-endian NIfTI-1 is supported")
    try:
        img = nib.Nifti1Image.from_bytes(raw)
        header = img.header
        dtype = header.get_data_dtype()
        if np.dtype(dtype).newbyteorder("=") not in ACCEPTED_DTYPES:
            raise FormatError(f"{path}: unsupported voxel type {dtype}")
        grid = np.asanyarray(img.dataobj)
    except FormatError:
        raise
    except Exception as exc:  # nibabel raises a zoo of types on bad headers
        raise FormatError(f"{path}: malformed NIfTI header ({exc})") from exc
    if grid.ndim != 3:
        raise FormatError(f"{path}: expected a 3-D grid, got shape {grid.shape}")
    return grid, header


def write_nifti(path, grid: np.ndarray, header: nib.Nifti1Header | None = None,
                spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a NIfTI-1 file; ``.gz`` suffixes are compressed with a fixed mtime."""
    grid = np.asarray(grid)
    if header is not None:
        hdr = header.copy()
        hdr.set_data_dtype(grid.dtype)
        hdr.set_data_shape(grid.shape)
        affine = hdr.get_best_affine()
        img = nib.Nifti1Image(grid, affine, header=hdr)
    else:
        img = nib.Nifti1Image(grid, np.diag(list(spacing) + [1.0]))
        img.header.set_data_dtype(grid.dtype)
        img.header.set_zooms(tuple(spacing))
    raw = img.to_bytes()
    path = Path(path)
    if path.suffix == ".gz":
        raw = gzip.compress(raw, compresslevel=6, mtime=0)
    path.write_bytes(raw)


def case_paths(case_dir, case_id: str | None = None) -> tuple[list[Path], Path]:
    """File names for one case laid out as ``<case>/<case>_<modality>.nii.gz``."""
    case_dir = Path(case_dir)
    cid = case_id or case_dir.name
    images = [case_dir / f"{cid}_{m}.nii.gz" for m in MODALITIES]
    return images, case_dir / f"{cid}_seg.nii.gz"


def load_case(image_paths: Sequence, label_path=None) -> tuple[MultiModalVolume, LabelVolume | None]:
    """Load four modality files (T1, T1ce, T2, FLAIR order) and an optional label file."""
    if len(image_paths) != 4:
        raise UsageError(f"expected 4 modality files, got {len(image_paths)}")
    grids, headers = zip(*(read_nifti(p) for p in image_paths))
    shapes = {g.shape for g in grids}
    if len(shapes) != 1:
        raise ConsistencyError(f"modality shapes differ: {sorted(shapes)}")
    data = np.stack([np.asarray(g, dtype=np.float32) for g in grids])
    spacing = tuple(float(z) for z in headers[0].get_zooms()[:3])
    volume = MultiModalVolume(data, np.any(data != 0, axis=0), spacing)
    labels = None if label_path is None else read_labels(label_path, volume.shape)
    return volume, labels


def read_labels(path, expected_shape=None) -> LabelVolume:
    """Read an on-disk label grid ({0,1,2,4}) and map class 4 to the internal class 3."""
    raw, _ = read_nifti(path)
    if expected_shape is not None and raw.shape != tuple(expected_shape):
        raise ConsistencyError(f"label shape {raw.shape} != image shape {tuple(expected_shape)}")
    raw = np.asarray(raw)
    if np.any(raw != np.round(raw)):
        raise DataError(f"{path}: non-integer label values")
    raw = raw.astype(np.int16)
    bad = np.setdiff1d(np.unique(raw), RAW_LABELS)
    if bad.size:
        raise DataError(f"{path}: label values {bad.tolist()} outside {{0,1,2,4}}")
    return LabelVolume(np.where(raw == 4, 3, raw))


def export_labels(labels: np.ndarray) -> np.ndarray:
    """Map internal classes back to the on-disk convention (3 -> 4) as uint8."""
    out = np.asarray(labels, dtype=np.uint8).copy()
    out[out == 3] = 4
    return out


def uncrop(grid: np.ndarray, origin_offset, full_shape, fill=0) -> np.ndarray:
    out = np.full(tuple(full_shape), fill, dtype=grid.dtype)
    sl = tuple(slice(o, o + s) for o, s in zip(origin_offset, grid.shape))
    out[sl] = grid
    return out


# -------------------------------------------------------------- preprocessing


def crop_to_brain_bbox(v: MultiModalVolume, labels: LabelVolume | None = None):
    """Crop to the tight bounding box of the brain mask."""
    if not v.brain_mask.any():
        raise DegenerateInputError("brain mask is empty; nothing to crop")
    coords = np.nonzero(v.brain_mask)
    lo = [int(c.min()) for c in coords]
    hi = [int(c.max()) + 1 for c in coords]
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    offset = tuple(o + a for o, a in zip(v.origin_offset, lo))
    out = MultiModalVolume(v.data[(slice(None),) + sl].copy(), v.brain_mask[sl].copy(), v.spacing, offset)
    out_labels = None if labels is None else LabelVolume(labels.labels[sl].copy())
    return out, out_labels


def rescale_by_percentile(v: MultiModalVolume, q: float = 99.5) -> MultiModalVolume:
    """Divide each channel by the ``q``-th percentile of its nonzero voxels."""
    data = v.data.astype(np.float64)
    for c in range(data.shape[0]):
        nz = data[c][data[c] != 0]
        if nz.size == 0:
            raise DegenerateInputError(f"channel {c} ({MODALITIES[c]}) has no nonzero voxels")
        divisor = np.percentile(nz, q)
        if divisor == 0:
            raise DegenerateInputError(f"channel {c} ({MODALITIES[c]}) has a zero {q} percentile")
        data[c] /= divisor
    return replace(v, data=data.astype(np.float32), brain_mask=v.brain_mask.copy())


def compute_dataset_stats(corpus: Sequence[MultiModalVolume]) -> DatasetStats:
    """Per-channel mean and population std pooled over nonzero voxels of all cases."""
    if not corpus:
        raise UsageError("cannot compute statistics of an empty corpus")
    n_ch = corpus[0].data.shape[0]
    count = np.zeros(n_ch)
    total = np.zeros(n_ch)
    for v in corpus:
        for c in range(n_ch):
            nz = v.data[c][v.data[c] != 0].astype(np.float64)
            count[c] += nz.size
            total[c] += nz.sum()
    if np.any(count < 2):
        raise DegenerateInputError("every channel needs at least two nonzero voxels corpus-wide")
    mean = total / count
    sq = np.zeros(n_ch)
    for v in corpus:
        for c in range(n_ch):
            nz = v.data[c][v.data[c] != 0].astype(np.float64)
            sq[c] += np.square(nz - mean[c]).sum()
    return DatasetStats(mean, np.sqrt(sq / count), len(corpus))


def standardize(v: MultiModalVolume, stats: DatasetStats) -> MultiModalVolume:
    """Affine per-channel standardisation, applied to every voxel."""
    mean = stats.mean.reshape(-1, 1, 1, 1)
    std = stats.std.reshape(-1, 1, 1, 1)
    data = (v.data.astype(np.float64) - mean) / std
    return replace(v, data=data.astype(np.float32), brain_mask=v.brain_mask.copy())


def destandardize(v: MultiModalVolume, stats: DatasetStats) -> MultiModalVolume:
    mean = stats.mean.reshape(-1, 1, 1, 1)
    std = stats.std.reshape(-1, 1, 1, 1)
    data = v.data.astype(np.float64) * std + mean
    return replace(v, data=data.astype(np.float32), brain_mask=v.brain_mask.copy())

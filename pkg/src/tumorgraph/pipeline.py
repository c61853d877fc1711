"""Case-level glue between the modules: preprocessing, graph caching, training inputs and prediction."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import nibabel as nib
import numpy as np

from . import graph as graph_mod
from . import supervoxel as sv
from .config import SlicConfig
from .errors import DataError, UsageError
from .gnn import GraphSageNet, predict_logits
from .phantom import read_manifest, write_manifest
from .refine import (PatchBounds, RefineCase, RefineCNN, cnn_forward, merge_predictions,
                     predicted_labels, reproject_logits, tumor_patch)
from .volume import (DatasetStats, LabelVolume, MultiModalVolume, case_paths, compute_dataset_stats,
                     crop_to_brain_bbox, export_labels, load_case, read_nifti, rescale_by_percentile,
                     standardize, uncrop, write_nifti)

log = logging.getLogger(__name__)

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path, **arrays) -> None:
    """``np.savez``-compatible archive with fixed timestamps, so reruns are byte-identical."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def map_jobs(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Ordered map, optionally over worker processes."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------ dataset layout


def list_cases(data_dir) -> list[tuple[str, str]]:
    """(case ID, split) pairs from ``manifest.txt``, or every case directory as ``train``."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    if manifest.exists():
        return read_manifest(manifest)
    return [(p.name, "train") for p in sorted(data_dir.iterdir()) if p.is_dir()]


def select(cases, split: str | None):
    if split in (None, "all"):
        return list(cases)
    return [c for c in cases if c[1] == split]


@dataclass
class PreprocessedCase:
    case_id: str
    volume: MultiModalVolume
    labels: LabelVolume | None
    original_shape: tuple
    header: bytes

    def save(self, path) -> None:
        save_arrays(path,
                    data=self.volume.data, mask=self.volume.brain_mask,
                    labels=(self.labels.labels if self.labels is not None
                            else np.zeros((0, 0, 0), dtype=np.int8)),
                    origin_offset=np.array(self.volume.origin_offset, dtype=np.int64),
                    original_shape=np.array(self.original_shape, dtype=np.int64),
                    spacing=np.array(self.volume.spacing, dtype=np.float64),
                    header=np.frombuffer(self.header, dtype=np.uint8))

    @classmethod
    def load(cls, path) -> "PreprocessedCase":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing preprocessed case: {path}")
        with np.load(path, allow_pickle=False) as z:
            volume = MultiModalVolume(z["data"], z["mask"], tuple(z["spacing"]), tuple(z["origin_offset"]))
            labels = LabelVolume(z["labels"]) if z["labels"].size else None
            return cls(path.stem, volume, labels, tuple(int(s) for s in z["original_shape"]),
                       z["header"].tobytes())


def load_raw_case(data_dir, case_id: str):
    images, seg = case_paths(Path(data_dir) / case_id, case_id)
    missing = [p.name for p in images if not p.exists()]
    if missing:
        raise DataError(f"case {case_id}: missing modality file(s) {', '.join(missing)}")
    volume, labels = load_case(images, seg if seg.exists() else None)
    _, header = read_nifti(images[0])
    return volume, labels, bytes(header.binaryblock)


def preprocess_dataset(data_dir, out_dir, jobs: int = 1) -> DatasetStats:
    """Crop and rescale every case, pool statistics over the train split, standardise all splits."""
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    cases = list_cases(data_dir)
    if not cases:
        raise UsageError(f"no cases found in {data_dir}")
    if not select(cases, "train"):
        raise UsageError("statistics need at least one train-split case")
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = {}
    for case_id, _ in cases:
        volume, labels, header = load_raw_case(data_dir, case_id)
        original_shape = volume.shape
        try:
            volume, labels = crop_to_brain_bbox(volume, labels)
            volume = rescale_by_percentile(volume)
        except DataError as exc:
            raise DataError(f"case {case_id}: {exc}") from exc
        staged[case_id] = (volume, labels, original_shape, header)
    stats = compute_dataset_stats([staged[cid][0] for cid, split in cases if split == "train"])
    for case_id, _ in cases:
        volume, labels, original_shape, header = staged[case_id]
        PreprocessedCase(case_id, standardize(volume, stats), labels, original_shape, header).save(
            out_dir / f"{case_id}.npz")
    (out_dir / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(out_dir / "manifest.txt", cases)
    return stats


def list_preprocessed(data_dir) -> list[tuple[str, str]]:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    if manifest.exists():
        return read_manifest(manifest)
    return [(p.stem, "train") for p in sorted(data_dir.glob("*.npz"))]


# ------------------------------------------------------------------ graphs


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:24]


def _digest(path, slic: SlicConfig) -> str:
    h = hashlib.sha256(Path(path).read_bytes())
    h.update(json.dumps(asdict(slic), sort_keys=True).encode())
    return h.hexdigest()[:24]


def case_graph(case: PreprocessedCase, slic: SlicConfig):
    partition = sv.slic_partition(case.volume, slic.k, slic.m, slic.max_iter, slic.seed)
    g = graph_mod.build_graph(case.volume, partition, case.labels)
    return partition, g


def _graph_job(args):
    path, slic_dict, cache_dir = args
    slic = SlicConfig(**slic_dict)
    key = _digest(path, slic)
    svp = Path(cache_dir) / f"{key}.svp" if cache_dir else None
    bgr = Path(cache_dir) / f"{key}.bgr" if cache_dir else None
    if svp is not None and svp.exists() and bgr.exists():
        return str(svp), str(bgr), True
    case = PreprocessedCase.load(path)
    partition, g = case_graph(case, slic)
    if svp is None:
        raise UsageError("graph jobs need a cache directory")
    sv.save_partition(svp, partition)
    graph_mod.save_graph(bgr, g)
    return str(svp), str(bgr), False


def cached_graphs(paths: Sequence, slic: SlicConfig, cache_dir, jobs: int = 1):
    """Partitions and graphs for each preprocessed case, reused when the content hash matches."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    results = map_jobs(_graph_job, [(str(p), asdict(slic), str(cache_dir)) for p in paths], jobs)
    out = []
    for svp, bgr, hit in results:
        log.debug("graph %s (%s)", bgr, "cached" if hit else "built")
        out.append((sv.load_partition(svp), graph_mod.load_graph(bgr)))
    return out


# -------------------------------------------------------------- prediction


def logit_volume(model: GraphSageNet, partition, g) -> np.ndarray:
    return reproject_logits(predict_logits(g, model), partition)


def cached_logit_volume(model: GraphSageNet, model_tag: str, case_path, slic: SlicConfig, partition, g,
                        cache_dir) -> np.ndarray:
    """Node logits for one case, stored under the case/SLIC key plus a GNN checkpoint tag."""
    path = Path(cache_dir) / f"{_digest(case_path, slic)}.{model_tag}.logits.npy"
    if path.exists():
        node_logits = np.load(path, allow_pickle=False)
    else:
        node_logits = predict_logits(g, model)
        with open(path, "wb") as fh:
            np.save(fh, node_logits, allow_pickle=False)
    return reproject_logits(node_logits, partition)


def refine_case_inputs(case: PreprocessedCase, logits: np.ndarray) -> RefineCase:
    if case.labels is None:
        raise UsageError(f"case {case.case_id} has no labels for CNN training")
    return RefineCase(logits, case.volume.data, case.labels.labels)


@dataclass
class CasePrediction:
    gnn: np.ndarray  # cropped-grid labels from the GNN alone
    final: np.ndarray  # after CNN refinement (equals ``gnn`` without a CNN)
    bounds: PatchBounds | None


def predict_case(case: PreprocessedCase, partition, g, gnn_model: GraphSageNet,
                 cnn_model: RefineCNN | None = None, margin: int = 8) -> CasePrediction:
    lv = logit_volume(gnn_model, partition, g)
    mask = case.volume.brain_mask
    gnn_pred = predicted_labels(lv, mask)
    if cnn_model is None:
        return CasePrediction(gnn_pred, gnn_pred.copy(), None)
    bounds = tumor_patch(lv, margin)
    if bounds is None:
        return CasePrediction(gnn_pred, gnn_pred.copy(), None)
    sl = (slice(None),) + bounds.slices
    refined = cnn_forward(cnn_model, lv[sl], case.volume.data[sl]).data
    return CasePrediction(gnn_pred, merge_predictions(gnn_pred, refined, bounds, mask), bounds)


def export_prediction(path, case: PreprocessedCase, labels: np.ndarray) -> None:
    """Write labels in the original (pre-crop) geometry with BraTS label values."""
    full = uncrop(np.asarray(labels, dtype=np.int8), case.volume.origin_offset, case.original_shape)
    header = nib.Nifti1Header.from_fileobj(io.BytesIO(case.header)) if case.header else None
    write_nifti(path, export_labels(full), header=header, spacing=case.volume.spacing)


def original_bounds(case: PreprocessedCase, bounds: PatchBounds | None):
    if bounds is None:
        return None
    off = case.volume.origin_offset
    return (tuple(a + o for a, o in zip(bounds.lo, off)), tuple(b + o for b, o in zip(bounds.hi, off)))

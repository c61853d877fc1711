"""Supervoxel region-adjacency graphs: node features, mode labels and edges."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConsistencyError, DegenerateInputError, FormatError, UsageError
from .supervoxel import N_CLASSES, SupervoxelPartition, _face_pairs
from .volume import LabelVolume, MultiModalVolume

FEATURE_PERCENTILES = (10.0, 30.0, 50.0, 70.0, 90.0)
N_FEATURES = 4 * len(FEATURE_PERCENTILES)
WEIGHT_CLIP = (0.2, 20.0)


@dataclass
class BrainGraph:
    node_features: np.ndarray  # (S, 20) float32, modality-major
    edges: np.ndarray  # (E, 2) int64, each row (a, b) with a < b
    node_labels: np.ndarray | None = None
    node_to_supervoxel: np.ndarray | None = None
    class_weights: np.ndarray | None = None

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float32)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.node_to_supervoxel is None:
            self.node_to_supervoxel = np.arange(self.n_nodes)
        if self.node_labels is not None:
            self.node_labels = np.asarray(self.node_labels, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    def neighborhoods(self, self_loops: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """CSR ``(indptr, indices)`` of each node's neighbours, sorted by node ID."""
        return csr_neighborhoods(self.n_nodes, self.edges, self_loops)


def csr_neighborhoods(n_nodes: int, edges: np.ndarray, self_loops: bool = True):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    if self_loops:
        loops = np.arange(n_nodes)
        src = np.concatenate([src, loops])
        dst = np.concatenate([dst, loops])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=n_nodes))])
    return indptr, dst


def _segment_percentiles(values: np.ndarray, seg: np.ndarray, n_seg: int, qs) -> np.ndarray:
    """Linear-interpolation percentiles of ``values`` grouped by ``seg``."""
    order = np.lexsort((values, seg))
    v = values[order].astype(np.float64)
    counts = np.bincount(seg, minlength=n_seg)
    if np.any(counts == 0):
        raise DegenerateInputError("empty supervoxel")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    out = np.empty((n_seg, len(qs)))
    for j, q in enumerate(qs):
        rank = q / 100.0 * (counts - 1)
        lo = np.floor(rank).astype(np.int64)
        frac = rank - lo
        hi = np.minimum(lo + 1, counts - 1)
        a, b = v[starts + lo], v[starts + hi]
        out[:, j] = a + frac * (b - a)
    return out


def compute_node_features(v: MultiModalVolume, p: SupervoxelPartition) -> np.ndarray:
    """Per supervoxel and channel, the 10/30/50/70/90th intensity percentiles."""
    if p.assignment.shape != v.shape:
        raise ConsistencyError(f"partition shape {p.assignment.shape} != volume shape {v.shape}")
    inside = p.assignment >= 0
    seg = p.assignment[inside].astype(np.int64)
    n_seg = p.n_supervoxels
    blocks = [_segment_percentiles(v.data[c][inside], seg, n_seg, FEATURE_PERCENTILES)
              for c in range(v.data.shape[0])]
    return np.concatenate(blocks, axis=1).astype(np.float32)


def label_histograms(p: SupervoxelPartition, labels: LabelVolume) -> np.ndarray:
    if p.assignment.shape != labels.shape:
        raise ConsistencyError(f"partition shape {p.assignment.shape} != label shape {labels.shape}")
    inside = p.assignment >= 0
    key = p.assignment[inside].astype(np.int64) * N_CLASSES + labels.labels[inside]
    return np.bincount(key, minlength=p.n_supervoxels * N_CLASSES).reshape(-1, N_CLASSES)


def compute_node_labels(p: SupervoxelPartition, labels: LabelVolume) -> np.ndarray:
    """Mode label per supervoxel; ties go to the highest class index."""
    hist = label_histograms(p, labels)
    return (N_CLASSES - 1 - np.argmax(hist[:, ::-1], axis=1)).astype(np.int64)


def adjacency_edges(assignment: np.ndarray) -> np.ndarray:
    """Unique face-adjacent supervoxel pairs ``(a, b)``, ``a < b``, sorted."""
    a, b = _face_pairs(assignment >= 0)
    flat = assignment.ravel()
    la, lb = flat[a], flat[b]
    differ = la != lb
    lo = np.minimum(la[differ], lb[differ]).astype(np.int64)
    hi = np.maximum(la[differ], lb[differ]).astype(np.int64)
    if not len(lo):
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.stack([lo, hi], axis=1), axis=0)


def build_graph(v: MultiModalVolume, p: SupervoxelPartition, labels: LabelVolume | None = None) -> BrainGraph:
    if p.n_supervoxels == 0:
        raise DegenerateInputError("partition has no supervoxels")
    feats = compute_node_features(v, p)
    node_labels = None if labels is None else compute_node_labels(p, labels)
    return BrainGraph(feats, adjacency_edges(p.assignment), node_labels, np.arange(p.n_supervoxels))


def compute_class_weights(graphs: Sequence[BrainGraph]) -> np.ndarray:
    """Inverse-prevalence class weights ``N / (4 N_c)`` clipped to [0.2, 20]."""
    labelled = [g.node_labels for g in graphs if g.node_labels is not None]
    if not labelled:
        raise UsageError("class weights need at least one labelled graph")
    counts = np.bincount(np.concatenate(labelled), minlength=N_CLASSES).astype(np.float64)
    total = counts.sum()
    weights = np.full(N_CLASSES, WEIGHT_CLIP[1])
    present = counts > 0
    weights[present] = total / (N_CLASSES * counts[present])
    return np.clip(weights, *WEIGHT_CLIP)


# ---------------------------------------------------------- serialisation

_BGR_MAGIC = b"BGR1"


def save_graph(path, g: BrainGraph) -> None:
    """Little-endian binary: magic, u32 nodes/features/edges, u8 flags, then sections."""
    flags = (g.node_labels is not None) | ((g.class_weights is not None) << 1)
    parts = [_BGR_MAGIC,
             struct.pack("<IIIB", g.n_nodes, g.node_features.shape[1], len(g.edges), flags),
             np.ascontiguousarray(g.node_features, dtype="<f4").tobytes()]
    if g.node_labels is not None:
        parts.append(np.ascontiguousarray(g.node_labels, dtype="<i4").tobytes())
    parts.append(np.ascontiguousarray(g.edges, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(g.node_to_supervoxel, dtype="<u4").tobytes())
    if g.class_weights is not None:
        parts.append(np.ascontiguousarray(g.class_weights, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_graph(path) -> BrainGraph:
    blob = Path(path).read_bytes()
    if blob[:4] != _BGR_MAGIC:
        raise FormatError(f"{path}: not a graph file (bad magic)")
    try:
        n, f, e, flags = struct.unpack_from("<IIIB", blob, 4)
        pos = 17

        def take(dtype, count):
            nonlocal pos
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
            pos += arr.nbytes
            return arr

        feats = take("<f4", n * f).reshape(n, f)
        labels = take("<i4", n).astype(np.int64) if flags & 1 else None
        edges = take("<u4", 2 * e).reshape(e, 2).astype(np.int64)
        n2s = take("<u4", n).astype(np.int64)
        weights = take("<f4", N_CLASSES).astype(np.float64) if flags & 2 else None
    except ValueError as exc:
        raise FormatError(f"{path}: truncated graph file") from exc
    return BrainGraph(feats.copy(), edges, labels, n2s, weights)

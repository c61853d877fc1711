"""Multi-channel 3-D SLIC supervoxels and achievable segmentation accuracy."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import ConsistencyError, DegenerateInputError, FormatError, UsageError
from .volume import LabelVolume, MultiModalVolume

log = logging.getLogger(__name__)

N_CLASSES = 4


@dataclass
class SupervoxelPartition:
    assignment: np.ndarray  # (X, Y, Z) int32; -1 outside the brain
    k_requested: int
    m: float
    grid_step: float = float("nan")
    iterations: int = 0
    seed: int = 0

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int32)

    @property
    def n_supervoxels(self) -> int:
        return int(self.assignment.max()) + 1 if self.assignment.size else 0

    def voxel_counts(self) -> np.ndarray:
        a = self.assignment[self.assignment >= 0]
        return np.bincount(a, minlength=self.n_supervoxels)

    @property
    def supervoxels(self) -> list[tuple[int, np.ndarray]]:
        """``(id, coords)`` pairs with ``coords`` an (n, 3) array of voxel indices."""
        flat = self.assignment.ravel()
        inside = np.flatnonzero(flat >= 0)
        order = inside[np.argsort(flat[inside], kind="stable")]
        bounds = np.concatenate([[0], np.cumsum(self.voxel_counts())])
        coords = np.stack(np.unravel_index(order, self.assignment.shape), axis=1)
        return [(i, coords[bounds[i]:bounds[i + 1]]) for i in range(self.n_supervoxels)]


# ------------------------------------------------------------------- SLIC


def _gradient_energy(data: np.ndarray) -> np.ndarray:
    energy = np.zeros(data.shape[1:], dtype=np.float64)
    for ch in data:
        for g in np.gradient(ch.astype(np.float64)):
            energy += g * g
    return energy


def _seed_centers(v: MultiModalVolume, step: float) -> np.ndarray:
    shape = v.shape
    axes = [np.unique(np.floor(np.arange(step / 2, n, step)).astype(np.int64)) for n in shape]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    grid = grid[v.brain_mask[tuple(grid.T)]]
    if step >= 3 and len(grid):
        energy = np.where(v.brain_mask, _gradient_energy(v.data), np.inf)
        padded = np.pad(energy, 1, constant_values=np.inf)
        offsets = [(0, 0, 0)] + [o for o in product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
        offsets = np.array(offsets)
        cand = grid[:, None, :] + offsets[None, :, :]  # (n, 27, 3)
        vals = padded[tuple((cand + 1).transpose(2, 0, 1))]
        grid = cand[np.arange(len(grid)), np.argmin(vals, axis=1)]
        _, first = np.unique(grid, axis=0, return_index=True)
        grid = grid[np.sort(first)]
    return grid


def _assign(feats, mask, pos, col, active, step, m):
    shape = mask.shape
    dist = np.full(shape, np.inf, dtype=np.float64)
    lab = np.full(shape, -1, dtype=np.int32)
    spatial_w = (m / step) ** 2
    reach = step
    for i in np.flatnonzero(active):
        lo = np.maximum(np.floor(pos[i] - reach).astype(int), 0)
        hi = np.minimum(np.ceil(pos[i] + reach).astype(int) + 1, shape)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        sub = feats[(slice(None),) + sl]
        dc2 = np.square(sub - col[i][:, None, None, None]).sum(axis=0)
        dx = np.arange(lo[0], hi[0]) - pos[i, 0]
        dy = np.arange(lo[1], hi[1]) - pos[i, 1]
        dz = np.arange(lo[2], hi[2]) - pos[i, 2]
        ds2 = dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2
        d2 = dc2 + ds2 * spatial_w
        dsub = dist[sl]
        upd = (d2 < dsub) & mask[sl]
        dsub[upd] = d2[upd]
        lab[sl][upd] = i
    return lab


def slic_partition(v: MultiModalVolume, k: int, m: float, max_iter: int = 10, seed: int = 0,
                   tol: float = 0.5) -> SupervoxelPartition:
    """Cluster the in-brain voxels of ``v`` into roughly ``k`` compact supervoxels.

    Distance is ``sqrt(dc**2 + (ds / S)**2 * m**2)`` with ``dc`` the Euclidean
    distance over all channels, ``ds`` the spatial distance in voxels and ``S``
    the seeding grid step.  Only brain voxels take part, so every supervoxel
    lies wholly inside the mask.  A post-pass makes every supervoxel
    6-connected.
    """
    if k < 1:
        raise UsageError("k must be at least 1")
    if m <= 0:
        raise UsageError("compactness m must be positive")
    mask = v.brain_mask
    n_in = int(mask.sum())
    if n_in == 0:
        raise DegenerateInputError("brain mask is empty")
    if k > n_in:
        log.warning("k=%d exceeds %d brain voxels; clamping", k, n_in)
        k = n_in
    step = (n_in / k) ** (1.0 / 3.0)
    feats = v.data.astype(np.float64)

    pos = _seed_centers(v, step).astype(np.float64)
    col = feats[(slice(None),) + tuple(pos.astype(int).T)].T.copy()
    active = np.ones(len(pos), dtype=bool)
    coords = np.nonzero(mask)
    coord_arr = np.stack(coords, axis=1).astype(np.float64)
    voxel_feats = feats[(slice(None),) + coords].T

    iterations = 0
    lab = None
    for iterations in range(1, max_iter + 1):
        lab = _assign(feats, mask, pos, col, active, step, m)
        owner = lab[coords]
        hit = owner >= 0
        counts = np.bincount(owner[hit], minlength=len(pos))
        active = counts > 0
        new_pos = pos.copy()
        for ax in range(3):
            new_pos[active, ax] = (np.bincount(owner[hit], coord_arr[hit, ax], len(pos))[active]
                                   / counts[active])
        for c in range(feats.shape[0]):
            col[active, c] = np.bincount(owner[hit], voxel_feats[hit, c], len(pos))[active] / counts[active]
        shift = np.sqrt(np.square(new_pos - pos).sum(axis=1))[active]
        pos = new_pos
        if shift.size == 0 or shift.max() < tol:
            break

    assignment = _enforce_connectivity(lab, mask, min_size=step ** 3 / 4.0)
    return SupervoxelPartition(assignment, k, float(m), step, iterations, seed)


def _face_pairs(mask: np.ndarray):
    """Flat index pairs of 6-adjacent voxels that are both inside ``mask``."""
    idx = np.arange(mask.size).reshape(mask.shape)
    out = []
    for ax in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[ax] = slice(None, -1)
        b[ax] = slice(1, None)
        both = mask[tuple(a)] & mask[tuple(b)]
        out.append((idx[tuple(a)][both], idx[tuple(b)][both]))
    return np.concatenate([p[0] for p in out]), np.concatenate([p[1] for p in out])


def _enforce_connectivity(lab: np.ndarray, mask: np.ndarray, min_size: float) -> np.ndarray:
    """Split supervoxels into 6-connected pieces and absorb small strays.

    Each label keeps its largest piece.  Other pieces (and voxels no center
    reached) smaller than ``min_size`` are merged into the adjacent
    supervoxel sharing the most faces with them; larger stray pieces become
    supervoxels of their own.
    """
    flat_lab = lab.ravel()
    inside = np.flatnonzero(mask.ravel())
    compact = np.full(mask.size, -1, dtype=np.int64)
    compact[inside] = np.arange(len(inside))
    lab_in = flat_lab[inside]

    a, b = _face_pairs(mask)
    same = flat_lab[a] == flat_lab[b]
    ca, cb = compact[a[same]], compact[b[same]]
    n = len(inside)
    g = sparse.coo_matrix((np.ones(len(ca), dtype=np.int8), (ca, cb)), shape=(n, n))
    n_comp, comp = connected_components(g, directed=False)

    size = np.bincount(comp, minlength=n_comp)
    comp_label = np.full(n_comp, -1, dtype=np.int64)
    comp_label[comp] = lab_in
    # largest piece per label wins; ties toward the piece met first in raster order
    first_voxel = np.full(n_comp, n, dtype=np.int64)
    np.minimum.at(first_voxel, comp, np.arange(n))
    order = np.lexsort((first_voxel, -size, comp_label))
    is_main = np.zeros(n_comp, dtype=bool)
    labelled = order[comp_label[order] >= 0]
    if len(labelled):
        starts = np.concatenate([[True], comp_label[labelled][1:] != comp_label[labelled][:-1]])
        is_main[labelled[starts]] = True
    to_merge = ~is_main & ((size < min_size) | (comp_label < 0))

    diff = ~same
    pa, pb = comp[compact[a[diff]]], comp[compact[b[diff]]]
    pairs, contact = np.unique(np.stack([np.minimum(pa, pb), np.maximum(pa, pb)], axis=1),
                               axis=0, return_counts=True)
    nbrs: list[list[tuple[int, int]]] = [[] for _ in range(n_comp)]
    for (x, y), cnt in zip(pairs.tolist(), contact.tolist()):
        nbrs[x].append((y, cnt))
        nbrs[y].append((x, cnt))

    parent = np.arange(n_comp)
    group_size = size.copy()

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    # each stray joins the neighbouring supervoxel it shares the most faces with
    by_size = np.lexsort((first_voxel, size))
    for c in by_size[to_merge[by_size]]:
        rc = find(c)
        shared: dict[int, int] = {}
        for nb, cnt in nbrs[c]:
            r = find(nb)
            if r != rc:
                shared[r] = shared.get(r, 0) + cnt
        if not shared:
            continue
        best = min(shared, key=lambda r: (-shared[r], -group_size[r], first_voxel[r]))
        parent[rc] = best
        group_size[best] += group_size[rc]
        first_voxel[best] = min(first_voxel[best], first_voxel[rc])

    roots = np.array([find(c) for c in range(n_comp)])
    voxel_root = roots[comp]
    # contiguous IDs in raster order of each supervoxel's first voxel
    _, first_idx, inverse = np.unique(voxel_root, return_index=True, return_inverse=True)
    rank = np.empty(len(first_idx), dtype=np.int64)
    rank[np.argsort(first_idx, kind="stable")] = np.arange(len(first_idx))
    out = np.full(mask.size, -1, dtype=np.int32)
    out[inside] = rank[inverse]
    return out.reshape(mask.shape)


# -------------------------------------------------------------------- ASA


def achievable_segmentation_accuracy(p: SupervoxelPartition, labels: LabelVolume) -> float:
    """Fraction of in-brain voxels an oracle labelling each supervoxel by its mode gets right."""
    if p.assignment.shape != labels.shape:
        raise ConsistencyError(f"partition shape {p.assignment.shape} != label shape {labels.shape}")
    inside = p.assignment >= 0
    n = int(inside.sum())
    if n == 0:
        raise DegenerateInputError("partition covers no voxels")
    a = p.assignment[inside].astype(np.int64)
    lab = labels.labels[inside].astype(np.int64)
    hist = np.bincount(a * N_CLASSES + lab, minlength=p.n_supervoxels * N_CLASSES)
    return float(hist.reshape(-1, N_CLASSES).max(axis=1).sum() / n)


@dataclass
class GridSearchResult:
    table: list  # (k, m, mean ASA)
    best: tuple  # (k, m)


def slic_grid_search(cases: Sequence[tuple[MultiModalVolume, LabelVolume]], k_grid: Sequence[int],
                     m_grid: Sequence[float], max_iter: int = 10) -> GridSearchResult:
    if not cases or not k_grid or not m_grid:
        raise UsageError("grid search needs at least one case and one value per grid axis")
    table = []
    for k in sorted(k_grid):
        for m in sorted(m_grid):
            scores = [achievable_segmentation_accuracy(slic_partition(v, k, m, max_iter), lab)
                      for v, lab in cases]
            table.append((int(k), float(m), float(np.mean(scores))))
    best = table[0]
    for row in table[1:]:
        if row[2] > best[2]:
            best = row
    return GridSearchResult(table, (best[0], best[1]))


# ---------------------------------------------------------- serialisation

_SVP_MAGIC = b"SVP1"


def save_partition(path, p: SupervoxelPartition) -> None:
    """Binary sidecar plus a ``<path>.meta`` key=value text record."""
    path = Path(path)
    head = _SVP_MAGIC + struct.pack("<3I", *p.assignment.shape)
    path.write_bytes(head + np.ascontiguousarray(p.assignment, dtype="<i4").tobytes())
    meta = (f"k={p.k_requested}\nm={p.m!r}\nS={p.grid_step!r}\n"
            f"iterations={p.iterations}\nseed={p.seed}\n")
    Path(str(path) + ".meta").write_text(meta)


def load_partition(path) -> SupervoxelPartition:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != _SVP_MAGIC:
        raise FormatError(f"{path}: not a partition file (bad magic)")
    shape = struct.unpack_from("<3I", blob, 4)
    n = math.prod(shape)
    if len(blob) != 16 + 4 * n:
        raise FormatError(f"{path}: truncated partition file")
    grid = np.frombuffer(blob, dtype="<i4", offset=16).reshape(shape).astype(np.int32)
    meta = {}
    meta_path = Path(str(path) + ".meta")
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            key, _, val = line.partition("=")
            meta[key] = val
    return SupervoxelPartition(grid, int(meta.get("k", 0)), float(meta.get("m", "nan")),
                               float(meta.get("S", "nan")), int(meta.get("iterations", 0)),
                               int(meta.get("seed", 0)))

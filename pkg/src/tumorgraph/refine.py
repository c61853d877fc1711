"""Voxel-level refinement: logit reprojection, tumour patch cropping and a two-layer 3-D CNN."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConsistencyError, ShapeError, UsageError
from .supervoxel import SupervoxelPartition

log = logging.getLogger(__name__)

BACKGROUND_LOGITS = np.array([10.0, 0.0, 0.0, 0.0], dtype=np.float32)


@dataclass
class CnnConfig:
    kernel: int = 5
    padding: int = 2
    channels: tuple = (8, 16, 4)
    lr0: float = 0.0005
    lr_decay: float = 0.98
    weight_decay: float = 0.0001
    epochs: int = 100
    samples_per_batch: int = 1
    crop_margin: int = 8
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.crop_margin < 0:
            raise UsageError("crop margin must be non-negative")
        if self.samples_per_batch != 1:
            raise UsageError("the CNN trains on one sample per step")


@dataclass(frozen=True)
class PatchBounds:
    lo: tuple  # inclusive
    hi: tuple  # inclusive

    @property
    def slices(self) -> tuple:
        return tuple(slice(a, b + 1) for a, b in zip(self.lo, self.hi))

    @property
    def shape(self) -> tuple:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))


def argmax_high(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Argmax along ``axis`` with ties resolved toward the highest index."""
    n = logits.shape[axis]
    return (n - 1 - np.argmax(np.flip(logits, axis=axis), axis=axis)).astype(np.int8)


def reproject_logits(node_logits: np.ndarray, p: SupervoxelPartition) -> np.ndarray:
    """Paint each node's logit vector onto its supervoxel; background elsewhere."""
    node_logits = np.asarray(node_logits, dtype=np.float32)
    if node_logits.ndim != 2 or node_logits.shape[0] != p.n_supervoxels:
        raise ConsistencyError(
            f"{node_logits.shape[0]} logit rows for {p.n_supervoxels} supervoxels")
    c = node_logits.shape[1]
    out = np.empty((c,) + p.assignment.shape, dtype=np.float32)
    out[...] = BACKGROUND_LOGITS[:c, None, None, None]
    inside = p.assignment >= 0
    out[:, inside] = node_logits[p.assignment[inside]].T
    return out


def predicted_labels(logit_volume: np.ndarray, brain_mask: np.ndarray | None = None) -> np.ndarray:
    pred = argmax_high(logit_volume, axis=0)
    if brain_mask is not None:
        pred = np.where(brain_mask, pred, 0).astype(np.int8)
    return pred


def tumor_patch(logit_volume: np.ndarray, margin: int = 8) -> PatchBounds | None:
    """Bounding box of predicted tumour voxels grown by ``margin``; ``None`` when nothing is predicted."""
    tumor = argmax_high(logit_volume, axis=0) > 0
    if not tumor.any():
        return None
    coords = np.nonzero(tumor)
    shape = tumor.shape
    lo = tuple(max(int(c.min()) - margin, 0) for c in coords)
    hi = tuple(min(int(c.max()) + margin, n - 1) for c, n in zip(coords, shape))
    return PatchBounds(lo, hi)


class RefineCNN:
    def __init__(self, cfg: CnnConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        k = cfg.kernel
        c0, c1, c2 = cfg.channels
        self.w1 = ad.Parameter(ad.glorot_uniform((c1, c0, k, k, k), c0 * k ** 3, c1 * k ** 3, rng))
        self.b1 = ad.Parameter(np.zeros(c1))
        self.w2 = ad.Parameter(ad.glorot_uniform((c2, c1, k, k, k), c1 * k ** 3, c2 * k ** 3, rng))
        self.b2 = ad.Parameter(np.zeros(c2))

    def parameters(self) -> dict[str, ad.Parameter]:
        return {"conv1.weight": self.w1, "conv1.bias": self.b1,
                "conv2.weight": self.w2, "conv2.bias": self.b2}

    def __call__(self, x) -> ad.Tensor:
        pad = self.cfg.padding
        h = ad.relu(ad.conv3d(x, self.w1, self.b1, padding=pad))
        return ad.conv3d(h, self.w2, self.b2, padding=pad)

    def save(self, path, epoch: int = 0, extra: dict | None = None) -> None:
        ad.save_checkpoint(path, self.parameters(), epoch, {"cnn": asdict(self.cfg), **(extra or {})})

    @classmethod
    def load(cls, path) -> tuple["RefineCNN", dict]:
        params, epoch, meta = ad.load_checkpoint(path)
        model = cls(CnnConfig(**meta["cnn"]))
        for name, p in model.parameters().items():
            src = params[name]
            p.data[...] = src.data
            p.m, p.v, p.step = src.m, src.v, src.step
        meta["epoch"] = epoch
        return model, meta


def cnn_input(patch_logits: np.ndarray, patch_image: np.ndarray) -> np.ndarray:
    if patch_logits.shape[1:] != patch_image.shape[1:]:
        raise ShapeError(f"logit patch {patch_logits.shape} and image patch {patch_image.shape} differ")
    return np.concatenate([patch_logits, patch_image], axis=0)


def cnn_forward(model: RefineCNN, patch_logits: np.ndarray, patch_image: np.ndarray) -> ad.Tensor:
    """Refined (4, *P) logits from GNN logits and image channels over a patch ``P``."""
    return model(cnn_input(patch_logits, patch_image))


@dataclass
class RefineCase:
    logit_volume: np.ndarray  # (4, X, Y, Z), constant for this phase
    image: np.ndarray  # (4, X, Y, Z)
    labels: np.ndarray  # (X, Y, Z)


def train_cnn(cases: Sequence[RefineCase], cfg: CnnConfig,
              on_epoch: Callable[[int, float, float], None] | None = None):
    """Train the refinement CNN on GNN-cropped patches, one patch per step.

    The GNN outputs arrive as plain arrays, so no gradient can reach the GNN.
    Returns ``(model, per-epoch mean loss)``; the loss trace is empty when no
    case has a predicted tumour.
    """
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    model = RefineCNN(cfg, np.random.default_rng(init_seq))
    rng = np.random.default_rng(shuffle_seq)
    samples = []
    for case in cases:
        bounds = tumor_patch(case.logit_volume, cfg.crop_margin)
        if bounds is None:
            continue
        sl = (slice(None),) + bounds.slices
        x = cnn_input(case.logit_volume[sl], case.image[sl])
        samples.append((x, case.labels[bounds.slices].ravel().astype(np.int64)))
    if not samples:
        log.warning("no case has a GNN-predicted tumour; the CNN stays untrained")
        return model, []
    params = list(model.parameters().values())
    losses = []
    for epoch in range(cfg.epochs):
        lr = ad.lr_at_epoch(cfg.lr0, cfg.lr_decay, epoch)
        step_losses = []
        for i in rng.permutation(len(samples)):
            x, y = samples[i]
            for p in params:
                p.zero_grad()
            loss = ad.weighted_cross_entropy(ad.to_rows(model(x)), y)
            loss.backward()
            ad.adamw_step(params, lr, cfg.weight_decay)
            step_losses.append(float(loss.data))
        losses.append(float(np.mean(step_losses)))
        if on_epoch is not None:
            on_epoch(epoch, lr, losses[-1])
    return model, losses


def merge_predictions(gnn_pred: np.ndarray, cnn_logits: np.ndarray | None, bounds: PatchBounds | None,
                      brain_mask: np.ndarray | None = None) -> np.ndarray:
    """GNN labels outside the patch, CNN argmax inside it (background outside the brain)."""
    out = np.array(gnn_pred, dtype=np.int8, copy=True)
    if bounds is None or cnn_logits is None:
        return out
    if cnn_logits.shape[1:] != bounds.shape:
        raise ShapeError(f"CNN logits {cnn_logits.shape} do not match patch {bounds.shape}")
    refined = argmax_high(cnn_logits, axis=0)
    if brain_mask is not None:
        refined = np.where(brain_mask[bounds.slices], refined, 0)
    out[bounds.slices] = refined
    return out

"""GraphSAGE network with max-pool aggregation over supervoxel graphs."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, UsageError
from .graph import N_FEATURES, BrainGraph, compute_class_weights, csr_neighborhoods

log = logging.getLogger(__name__)


@dataclass
class GnnConfig:
    depth: int = 6
    hidden: int = 256
    in_features: int = N_FEATURES
    out_classes: int = 4
    lr0: float = 0.0005
    lr_decay: float = 0.98
    weight_decay: float = 0.0001
    epochs: int = 300
    graphs_per_batch: int = 6
    max_neighbors: int | None = None  # uniform neighbour sampling cap while training
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise UsageError("GNN depth must be at least 1")
        if self.graphs_per_batch < 1:
            raise UsageError("graphs_per_batch must be at least 1")


class GraphSagePoolLayer:
    """``act(W [h_u || max_v relu(W_pool h_v + b_pool)] + b)`` over ``v`` in the neighbourhood of ``u``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, activation: bool = True):
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.W = ad.Parameter(ad.glorot_uniform((n_out, 2 * n_in), 2 * n_in, n_out, rng))
        self.b = ad.Parameter(np.zeros(n_out))
        self.W_pool = ad.Parameter(ad.glorot_uniform((n_in, n_in), n_in, n_in, rng))
        self.b_pool = ad.Parameter(np.zeros(n_in))

    def parameters(self) -> dict[str, ad.Parameter]:
        return {"W": self.W, "b": self.b, "W_pool": self.W_pool, "b_pool": self.b_pool}

    def __call__(self, h, indptr, indices) -> ad.Tensor:
        h = ad.as_tensor(h)
        if h.shape[-1] != self.n_in:
            raise ShapeError(f"layer expects {self.n_in} input features, got {h.shape[-1]}")
        pooled = ad.relu(ad.add_bias(ad.matmul(h, self.W_pool, trans_b=True), self.b_pool))
        agg = ad.neighbor_max(pooled, indptr, indices)
        out = ad.add_bias(ad.matmul(ad.concat([h, agg]), self.W, trans_b=True), self.b)
        return ad.relu(out) if self.activation else out


class GraphSageNet:
    def __init__(self, cfg: GnnConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        widths = [cfg.in_features] + [cfg.hidden] * (cfg.depth - 1) + [cfg.out_classes]
        self.layers = [GraphSagePoolLayer(a, b, rng, activation=(i < cfg.depth - 1))
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]

    def parameters(self) -> dict[str, ad.Parameter]:
        return {f"layer{i}.{name}": p
                for i, layer in enumerate(self.layers)
                for name, p in layer.parameters().items()}

    def __call__(self, features, indptr, indices) -> ad.Tensor:
        h = ad.as_tensor(features)
        if h.data.ndim != 2 or h.shape[1] != self.cfg.in_features:
            raise ShapeError(f"expected (S, {self.cfg.in_features}) node features, got {h.shape}")
        for layer in self.layers:
            h = layer(h, indptr, indices)
        return h

    def save(self, path, epoch: int = 0, extra: dict | None = None) -> None:
        meta = {"gnn": asdict(self.cfg), **(extra or {})}
        ad.save_checkpoint(path, self.parameters(), epoch, meta)

    @classmethod
    def load(cls, path) -> tuple["GraphSageNet", dict]:
        params, epoch, meta = ad.load_checkpoint(path)
        model = cls(GnnConfig(**meta["gnn"]))
        for name, p in model.parameters().items():
            src = params[name]
            p.data[...] = src.data
            p.m, p.v, p.step = src.m, src.v, src.step
        meta["epoch"] = epoch
        return model, meta


def gnn_forward(g: BrainGraph, model: GraphSageNet) -> ad.Tensor:
    """Per-node logits for one graph, using every neighbour plus a self-loop."""
    indptr, indices = g.neighborhoods(self_loops=True)
    return model(g.node_features, indptr, indices)


def predict_logits(g: BrainGraph, model: GraphSageNet) -> np.ndarray:
    return gnn_forward(g, model).data.copy()


def union_graphs(graphs: Sequence[BrainGraph]):
    """Disjoint union: stacked features, offset edges and concatenated labels."""
    feats, edges, labels = [], [], []
    offset = 0
    for g in graphs:
        feats.append(g.node_features)
        edges.append(g.edges + offset)
        if g.node_labels is not None:
            labels.append(g.node_labels)
        offset += g.n_nodes
    merged = BrainGraph(np.concatenate(feats), np.concatenate(edges),
                        np.concatenate(labels) if len(labels) == len(graphs) else None)
    return merged


def sample_neighborhoods(indptr, indices, cap: int, rng: np.random.Generator):
    """Keep each node's self-loop plus up to ``cap`` uniformly sampled neighbours."""
    new_ptr = [0]
    kept = []
    for u in range(len(indptr) - 1):
        nb = indices[indptr[u]:indptr[u + 1]]
        others = nb[nb != u]
        if len(others) > cap:
            others = np.sort(rng.choice(others, size=cap, replace=False))
        row = np.concatenate([[u], others])
        kept.append(row)
        new_ptr.append(new_ptr[-1] + len(row))
    return np.asarray(new_ptr), np.concatenate(kept) if kept else np.zeros(0, dtype=np.int64)


def train_gnn(graphs: Sequence[BrainGraph], cfg: GnnConfig,
              on_epoch: Callable[[int, float, float], None] | None = None):
    """Train on labelled graphs; returns ``(model, per-epoch mean loss)``."""
    if not graphs:
        raise UsageError("empty GNN training set")
    if any(g.node_labels is None for g in graphs):
        raise UsageError("every training graph needs node labels")
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    model = GraphSageNet(cfg, np.random.default_rng(init_seq))
    rng = np.random.default_rng(shuffle_seq)
    weights = compute_class_weights(graphs)
    params = list(model.parameters().values())
    losses = []
    for epoch in range(cfg.epochs):
        lr = ad.lr_at_epoch(cfg.lr0, cfg.lr_decay, epoch)
        order = rng.permutation(len(graphs))
        batch_losses = []
        for start in range(0, len(order), cfg.graphs_per_batch):
            batch = union_graphs([graphs[i] for i in order[start:start + cfg.graphs_per_batch]])
            indptr, indices = batch.neighborhoods(self_loops=True)
            if cfg.max_neighbors is not None:
                indptr, indices = sample_neighborhoods(indptr, indices, cfg.max_neighbors, rng)
            for p in params:
                p.zero_grad()
            logits = model(batch.node_features, indptr, indices)
            loss = ad.weighted_cross_entropy(logits, batch.node_labels, weights)
            loss.backward()
            ad.adamw_step(params, lr, cfg.weight_decay)
            batch_losses.append(float(loss.data))
        losses.append(float(np.mean(batch_losses)))
        if on_epoch is not None:
            on_epoch(epoch, lr, losses[-1])
        log.debug("gnn epoch %d lr %.6g loss %.6f", epoch, lr, losses[-1])
    return model, losses


__all__ = ["GnnConfig", "GraphSagePoolLayer", "GraphSageNet", "gnn_forward", "predict_logits",
           "train_gnn", "union_graphs", "csr_neighborhoods"]

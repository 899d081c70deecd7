"""Bipartite reference/target frame graph and its message passing.

Reference-frame instances become k-nodes (ROIAlign crop, averaged to a
D-vector); every target-frame feature cell becomes a t-node. Edges join a
k-node to the t-nodes in a ``w x w`` cell window around the cell holding the
instance centre, and carry features initialised to ``|h_k - h_t|``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MlpParams, flatten_node_feature, mlp_forward, roi_align
from .structures import InstanceSet


@dataclass
class FrameGraph:
    k_ids: list
    k_centers: np.ndarray      # (m, 2) x, y
    k_feat: Tensor             # (m, D)
    t_feat: Tensor             # (H*W, D), row-major cells
    grid: tuple[int, int]      # (H, W)
    edge_k: np.ndarray         # (E,) k-node index
    edge_t: np.ndarray         # (E,) t-node index = y * W + x
    edge_feat: Tensor          # (E, D)
    window: int
    iterations: int = 0

    @property
    def num_edges(self) -> int:
        return len(self.edge_k)

    @property
    def dim(self) -> int:
        return self.t_feat.shape[1]

    def t_position(self, t_index) -> tuple[int, int]:
        return int(t_index) % self.grid[1], int(t_index) // self.grid[1]

    def to_json(self) -> str:
        """Debug dump of the edge list with endpoints and feature norms."""
        norms = np.linalg.norm(self.edge_feat.data, axis=1) if self.num_edges else []
        edges = []
        for e in range(self.num_edges):
            k = int(self.edge_k[e])
            x, y = self.t_position(self.edge_t[e])
            kid = self.k_ids[k]
            edges.append({"k_index": k, "k_id": kid if kid is None else int(kid),
                          "t_x": x, "t_y": y, "norm": float(norms[e])})
        return json.dumps({"grid": list(self.grid), "window": self.window,
                           "iterations": self.iterations, "edges": edges}, indent=1)


def window_cells(center, w: int, grid: tuple[int, int]) -> np.ndarray:
    """Flat t-node indices within Chebyshev distance < w/2 of the centre's cell."""
    h, wd = grid
    cx, cy = int(np.floor(center[0])), int(np.floor(center[1]))
    r = (w - 1) // 2 if w % 2 else w // 2
    lo_x, hi_x = max(cx - r, 0), min(cx + r + (0 if w % 2 else -1), wd - 1)
    lo_y, hi_y = max(cy - r, 0), min(cy + r + (0 if w % 2 else -1), h - 1)
    if lo_x > hi_x or lo_y > hi_y:
        return np.zeros(0, dtype=np.int64)
    ys, xs = np.meshgrid(np.arange(lo_y, hi_y + 1), np.arange(lo_x, hi_x + 1), indexing="ij")
    return (ys * wd + xs).ravel()


def k_node_features(instances: InstanceSet, feat_k, crop: int = 3) -> Tensor:
    """ROIAlign + mean-pool each instance box; precomputed ``feature`` fields win."""
    d = feat_k.shape[0]
    rows = []
    for inst in instances:
        if inst.feature is not None:
            rows.append(ad.reshape(ad.as_tensor(inst.feature), (1, d)))
        else:
            rows.append(ad.reshape(flatten_node_feature(roi_align(feat_k, inst.box, crop)), (1, d)))
    if not rows:
        return Tensor(np.zeros((0, d)))
    return ad.concat(rows, axis=0)


def build_graph(instances_k: InstanceSet, feat_k, feat_t, w: int, crop: int = 3) -> FrameGraph:
    feat_k, feat_t = ad.as_tensor(feat_k), ad.as_tensor(feat_t)
    if feat_k.shape != feat_t.shape:
        raise ValueError(f"reference and target features differ: {feat_k.shape} vs {feat_t.shape}")
    d, h, wd = feat_t.shape
    t_nodes = ad.transpose(ad.reshape(feat_t, (d, h * wd)))
    k_nodes = k_node_features(instances_k, feat_k, crop)
    ek, et = [], []
    for i, inst in enumerate(instances_k):
        cells = window_cells(inst.center, w, (h, wd))
        ek.append(np.full(len(cells), i, dtype=np.int64))
        et.append(cells)
    edge_k = np.concatenate(ek) if ek else np.zeros(0, dtype=np.int64)
    edge_t = np.concatenate(et) if et else np.zeros(0, dtype=np.int64)
    if len(edge_k):
        edge_feat = ad.abs_(ad.sub(ad.gather_rows(k_nodes, edge_k), ad.gather_rows(t_nodes, edge_t)))
    else:
        edge_feat = Tensor(np.zeros((0, d)))
    return FrameGraph(
        k_ids=[inst.instance_id for inst in instances_k],
        k_centers=instances_k.centers,
        k_feat=k_nodes, t_feat=t_nodes, grid=(h, wd),
        edge_k=edge_k, edge_t=edge_t, edge_feat=edge_feat, window=w,
    )


def message_pass(g: FrameGraph, n_e: MlpParams, n_v: MlpParams, iterations: int) -> FrameGraph:
    """Synchronous edge-then-node updates.

    edge:  h_e <- N_e([h_e, h_k, h_t])
    node:  h_i <- h_i + sum over incident edges of N_v([h_e(new), h_i(old)])
    """
    if iterations < 1:
        raise ValueError(f"need at least one message-passing iteration, got {iterations}")
    if g.num_edges == 0:
        return replace(g, iterations=g.iterations + iterations)
    hk, ht, he = g.k_feat, g.t_feat, g.edge_feat
    m, n = hk.shape[0], ht.shape[0]
    for _ in range(iterations):
        hk_e = ad.gather_rows(hk, g.edge_k)
        ht_e = ad.gather_rows(ht, g.edge_t)
        he = mlp_forward(n_e, ad.concat([he, hk_e, ht_e], axis=1))
        msg_k = mlp_forward(n_v, ad.concat([he, hk_e], axis=1))
        msg_t = mlp_forward(n_v, ad.concat([he, ht_e], axis=1))
        hk = ad.add(hk, ad.scatter_add(msg_k, g.edge_k, m))
        ht = ad.add(ht, ad.scatter_add(msg_t, g.edge_t, n))
    return replace(g, k_feat=hk, t_feat=ht, edge_feat=he, iterations=g.iterations + iterations)


def aggregate_feature(g: FrameGraph) -> Tensor:
    """t-node features back onto the grid: ``D x H x W``."""
    h, w = g.grid
    return ad.reshape(ad.transpose(g.t_feat), (g.dim, h, w))

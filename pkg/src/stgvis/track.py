"""Edge pruning, edge classification and greedy association."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import FrameGraph
from .layers import MlpParams, mlp_forward
from .structures import InstanceSet

BCE_EPS = 1e-6


@dataclass
class PrunedEdges:
    edge_index: np.ndarray   # rows into the graph's edge list
    k_index: np.ndarray      # k-node index
    det_index: np.ndarray    # detection index in frame t

    def __len__(self) -> int:
        return len(self.edge_index)


@dataclass(frozen=True)
class EdgeScore:
    k_instance_id: int
    t_detection_index: int
    score: float


@dataclass
class Assignment:
    matched: list[tuple[int, int]] = field(default_factory=list)
    new_tracks: list[int] = field(default_factory=list)
    unmatched_k: list[int] = field(default_factory=list)


def prune_edges(g: FrameGraph, det_t: InstanceSet, classes_k) -> PrunedEdges:
    """Keep edges landing on a detection's peak cell with a matching class."""
    h, w = g.grid
    owner = {}
    for d, det in enumerate(det_t):
        x, y = det.cell
        owner.setdefault(y * w + x, []).append(d)
    classes_k = np.asarray(classes_k, dtype=np.int64)
    keep_e, keep_k, keep_d = [], [], []
    for e, (k, t) in enumerate(zip(g.edge_k, g.edge_t)):
        for d in owner.get(int(t), ()):
            if det_t[d].class_id == classes_k[k]:
                keep_e.append(e)
                keep_k.append(int(k))
                keep_d.append(d)
    as_int = lambda v: np.asarray(v, dtype=np.int64)
    return PrunedEdges(as_int(keep_e), as_int(keep_k), as_int(keep_d))


def classify_edges(edge_feat, classifier: MlpParams) -> Tensor:
    """Association probability for each row of ``edge_feat`` (E x D) -> (E,)."""
    edge_feat = ad.as_tensor(edge_feat)
    if edge_feat.shape[0] == 0:
        return Tensor(np.zeros(0))
    return ad.sigmoid(ad.reshape(mlp_forward(classifier, edge_feat), (-1,)))


def edge_scores(g: FrameGraph, pruned: PrunedEdges, classifier: MlpParams) -> tuple[Tensor, list[EdgeScore]]:
    feats = ad.gather_rows(g.edge_feat, pruned.edge_index) if len(pruned) else Tensor(np.zeros((0, g.dim)))
    probs = classify_edges(feats, classifier)
    records = [EdgeScore(g.k_ids[k], int(d), float(s))
               for k, d, s in zip(pruned.k_index, pruned.det_index, probs.data)]
    return probs, records


def edge_loss(scores, labels) -> Tensor:
    """Mean binary cross-entropy over the pruned edges; 0 when there are none."""
    scores = ad.as_tensor(scores)
    y = np.asarray(labels, dtype=float).reshape(scores.shape)
    if scores.size == 0:
        return Tensor(0.0)
    p = ad.clamp(scores, BCE_EPS, 1 - BCE_EPS)
    ll = ad.add(ad.mul(ad.log(p), y), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y))
    return ad.scale(ad.sum_(ll), -1.0 / scores.size)


def resolve_associations(scores: list[EdgeScore], threshold: float = 0.5,
                         k_ids=None, num_detections: int | None = None) -> Assignment:
    """Greedy highest-score-first matching over edges scoring >= threshold.

    Ties go to the lower k id, then the lower detection index, so the result
    does not depend on the input order.
    """
    k_ids = sorted({s.k_instance_id for s in scores} if k_ids is None else set(k_ids))
    if num_detections is None:
        num_detections = 1 + max((s.t_detection_index for s in scores), default=-1)
    best: dict[tuple[int, int], float] = {}
    for s in scores:
        key = (s.k_instance_id, s.t_detection_index)
        best[key] = max(best.get(key, -np.inf), s.score)
    ranked = sorted(((sc, k, d) for (k, d), sc in best.items() if sc >= threshold),
                    key=lambda r: (-r[0], r[1], r[2]))
    taken_k, taken_d = set(), set()
    out = Assignment()
    for _, k, d in ranked:
        if k in taken_k or d in taken_d:
            continue
        taken_k.add(k)
        taken_d.add(d)
        out.matched.append((k, d))
    out.new_tracks = [d for d in range(num_detections) if d not in taken_d]
    out.unmatched_k = [k for k in k_ids if k not in taken_k]
    return out

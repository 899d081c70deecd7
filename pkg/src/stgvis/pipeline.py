"""Model assembly, pair training and online video inference."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tape, Tensor
from .config import Config
from .detect import DetectHead, decode_detections, detect_forward, detect_loss, encode_targets
from .graph import aggregate_feature, build_graph, k_node_features, message_pass
from .layers import BackboneParams, MlpParams, backbone_forward
from .metrics import Tube
from .segment import (FILTER_SIZE, SegHead, WarpParams, controller_forward, dice_loss, filters_at,
                      mask_forward_batch, position_maps, reduce_channels, warp_filters)
from .structures import Detection, InstanceSet, box_center
from .synth import Annotation, Video, VideoDataset
from .track import (Assignment, EdgeScore, classify_edges, edge_loss, prune_edges,
                    resolve_associations)

log = logging.getLogger(__name__)

STRIDE = 4


# ---------------------------------------------------------------------- model

@dataclass
class Model:
    backbone: BackboneParams
    n_e: MlpParams
    n_v: MlpParams
    det: DetectHead
    seg: SegHead
    warp: WarpParams
    edge_cls: MlpParams
    config: Config

    @classmethod
    def init(cls, config: Config, seed: int | None = None) -> "Model":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        d = config.D
        return cls(
            backbone=BackboneParams.init(rng, d, config.backbone_width),
            n_e=MlpParams.init(rng, [3 * d, 2 * d, d], "n_e"),
            n_v=MlpParams.init(rng, [2 * d, 2 * d, d], "n_v", last_std=1e-3),
            det=DetectHead.init(rng, d, config.num_classes, config.head_hidden),
            seg=SegHead.init(rng, d, config.head_hidden),
            warp=WarpParams.init(rng, d, config.head_hidden),
            edge_cls=MlpParams.init(rng, [d, config.head_hidden, 1], "edge_cls"),
            config=config,
        )

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.backbone.named("backbone"))
        out.update(self.n_e.named("n_e"))
        out.update(self.n_v.named("n_v"))
        out.update(self.det.named("det"))
        out.update(self.seg.named("seg"))
        out.update(self.warp.named("warp"))
        out.update(self.edge_cls.named("edge_cls"))
        return out

    def parameters(self) -> list[Tensor]:
        named = self.named_params()
        return [named[k] for k in sorted(named)]

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.named_params())

    def load(self, path) -> None:
        self.load_state(ad.load_checkpoint(path))

    def load_state(self, state: dict) -> None:
        named = self.named_params()
        missing = sorted(set(named) - set(state))
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, t in named.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != model shape {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)


# --------------------------------------------------------------- ground truth

def annotations_to_instances(anns: list[Annotation], stride: int = STRIDE) -> InstanceSet:
    out = InstanceSet()
    for a in anns:
        box = tuple(v / stride for v in a.box)
        out.append(Detection(class_id=a.class_id, score=1.0, center=box_center(box), box=box,
                             instance_id=a.instance_id, mask=a.mask))
    return out


def ground_truth_tubes(video: Video) -> list[Tube]:
    tubes: dict[int, Tube] = {}
    for f, anns in enumerate(video.annotations):
        for a in anns:
            tubes.setdefault(a.instance_id, Tube(a.instance_id, a.class_id, {})).masks[f] = a.mask
    return [tubes[i] for i in sorted(tubes)]


@dataclass
class TrainingPair:
    image_k: np.ndarray
    image_t: np.ndarray
    gt_k: InstanceSet
    gt_t: InstanceSet
    video: str = ""
    k: int = 0
    t: int = 0


def sample_training_pair(dataset: VideoDataset, rng: np.random.Generator, max_gap: int = 4) -> TrainingPair:
    """Uniform over (video, k, t) with 1 <= t - k <= max_gap; short videos are skipped."""
    usable = [v for v in dataset if v.num_frames >= 2]
    if not usable:
        raise ValueError("no video has two or more frames")
    video = usable[int(rng.integers(len(usable)))]
    pairs = [(k, t) for k in range(video.num_frames)
             for t in range(k + 1, min(k + max_gap, video.num_frames - 1) + 1)]
    k, t = pairs[int(rng.integers(len(pairs)))]
    return TrainingPair(video.frames[k], video.frames[t],
                        annotations_to_instances(video.annotations[k]),
                        annotations_to_instances(video.annotations[t]), video.name, k, t)


# ------------------------------------------------------------------- training

@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda_size: float = 0.1
    lambda_offset: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    @classmethod
    def from_config(cls, cfg: Config) -> "LossWeights":
        return cls(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda_size, cfg.lambda_offset)


def _mask_dice(model: Model, reduced, theta_map, gt: InstanceSet, theta_rows=None) -> Tensor:
    """Mean dice over instances, predicting at each ground-truth centre cell."""
    _, h, w = reduced.shape
    cells = [(min(max(x, 0), w - 1), min(max(y, 0), h - 1)) for x, y in gt.cells]
    theta = filters_at(theta_map, cells) if theta_rows is None else theta_rows
    logits = mask_forward_batch(reduced, position_maps(cells, h, w), theta)
    soft = ad.upsample_nearest(ad.sigmoid(logits), STRIDE)
    losses = [dice_loss(ad.index(soft, i), inst.mask) for i, inst in enumerate(gt)]
    return ad.scale(ad.sum_(ad.stack(losses)), 1.0 / len(losses))


def compute_losses(model: Model, pair: TrainingPair, weights: LossWeights) -> tuple[Tensor, dict]:
    """Forward one frame pair; returns the weighted total and logged parts."""
    cfg = model.config
    feat_k = backbone_forward(model.backbone, pair.image_k)
    feat_t = backbone_forward(model.backbone, pair.image_t)
    g = build_graph(pair.gt_k, feat_k, feat_t, cfg.w, cfg.crop)
    g = message_pass(g, model.n_e, model.n_v, cfg.L)
    fused = aggregate_feature(g)
    grid = fused.shape[1:]

    maps = detect_forward(model.det, fused)
    targets = encode_targets(pair.gt_t, model.det.num_classes, grid)
    l_det, det_parts = detect_loss(maps, targets, weights.lambda_size, weights.lambda_offset)

    mask_terms = []
    if len(pair.gt_t):
        reduced_t = reduce_channels(model.seg, fused)
        theta_t = controller_forward(model.seg, fused)
        theta_k_map = controller_forward(model.seg, feat_k)
        theta_warp = warp_filters(model.warp, feat_k, feat_t, theta_k_map)
        direct = _mask_dice(model, reduced_t, theta_t, pair.gt_t)
        warped = _mask_dice(model, reduced_t, theta_warp, pair.gt_t)
        mask_terms.append(ad.scale(ad.add(direct, warped), 0.5))
    if len(pair.gt_k):
        reduced_k = reduce_channels(model.seg, feat_k)
        theta_k = controller_forward(model.seg, feat_k)
        mask_terms.append(_mask_dice(model, reduced_k, theta_k, pair.gt_k))
    l_mask = ad.sum_(ad.stack(mask_terms)) if mask_terms else Tensor(0.0)

    pruned = prune_edges(g, pair.gt_t, pair.gt_k.class_ids)
    if len(pruned):
        probs = classify_edges(ad.gather_rows(g.edge_feat, pruned.edge_index), model.edge_cls)
        labels = [pair.gt_k[k].instance_id == pair.gt_t[d].instance_id
                  for k, d in zip(pruned.k_index, pruned.det_index)]
        l_edge = edge_loss(probs, labels)
    else:
        l_edge = Tensor(0.0)

    total = ad.add(ad.add(ad.scale(l_det, weights.lambda1), ad.scale(l_mask, weights.lambda2)),
                   ad.scale(l_edge, weights.lambda3))
    parts = {"L_det": l_det.item(), "L_mask": l_mask.item(), "L_edge": l_edge.item(),
             "L_total": total.item(), **det_parts, "edges": len(pruned)}
    return total, parts


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None)))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / norm
    return norm


def train_step(model: Model, pairs, weights: LossWeights, optimizer: SGD) -> dict:
    """One optimiser step on the mean loss over ``pairs`` (a pair or a list)."""
    pairs = [pairs] if isinstance(pairs, TrainingPair) else list(pairs)
    params = optimizer.params
    for p in params:
        p.grad = None
    logged = []
    for pair in pairs:
        with Tape() as tape:
            total, parts = compute_losses(model, pair, weights)
            scaled = ad.scale(total, 1.0 / len(pairs))
        if not np.isfinite(total.data).all():
            raise FloatingPointError(f"non-finite loss on {pair.video} ({pair.k}->{pair.t}): {parts}")
        tape.backward(scaled)
        logged.append(parts)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    # k-nodes sum messages over up to w*w edges, so the node update gets a smaller step
    for p in model.n_v.named("").values():
        p.grad *= model.config.node_lr_scale
    out = {k: float(np.mean([q[k] for q in logged])) for k in logged[0]}
    out["grad_norm"] = clip_gradients(params, model.config.clip_norm)
    optimizer.step()
    return out


LOG_FIELDS = ("step", "L_det", "L_mask", "L_edge", "L_total")


def train(model: Model, dataset: VideoDataset, steps: int | None = None, log_path=None,
          seed: int | None = None, callback: Callable | None = None) -> list[dict]:
    """Run the optimiser loop; optionally writes the CSV training log."""
    cfg = model.config
    steps = cfg.steps if steps is None else steps
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.milestones)
    weights = LossWeights.from_config(cfg)
    history = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    try:
        for step in range(steps):
            batch = [sample_training_pair(dataset, rng) for _ in range(cfg.batch_size)]
            parts = train_step(model, batch, weights, opt)
            parts["step"] = step
            history.append(parts)
            if writer is not None:
                writer.writerow([step] + [repr(parts[k]) for k in LOG_FIELDS[1:]])
            if callback is not None:
                callback(step, parts)
            if step % 50 == 0:
                log.info("step %d total %.4f det %.4f mask %.4f edge %.4f", step, parts["L_total"],
                         parts["L_det"], parts["L_mask"], parts["L_edge"])
    finally:
        if fh is not None:
            fh.close()
    return history


# ------------------------------------------------------------------ inference

@dataclass
class MemoryEntry:
    instance_id: int
    feature: np.ndarray       # D, cropped node feature
    filters: np.ndarray       # 169
    class_id: int
    last_box: tuple
    last_seen: int
    detection: Detection | None = None


@dataclass
class TrackMemory:
    entries: dict[int, MemoryEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, instance_id) -> bool:
        return instance_id in self.entries

    def ids(self) -> list[int]:
        return sorted(self.entries)


def memory_update(mem: TrackMemory, unmatched: list[MemoryEntry], frame_index: int,
                  delta_t: int) -> TrackMemory:
    """Insert entries stamped ``frame_index`` (refreshing repeats), then drop
    everything last seen more than ``delta_t`` frames ago."""
    entries = dict(mem.entries)
    for e in unmatched:
        entries[e.instance_id] = MemoryEntry(e.instance_id, e.feature, e.filters, e.class_id,
                                             e.last_box, frame_index, e.detection)
    return TrackMemory({k: v for k, v in entries.items() if frame_index - v.last_seen <= delta_t})


@dataclass
class _Track:
    track_id: int
    classes: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    last: Detection | None = None

    def to_tube(self) -> Tube:
        cls = int(np.bincount(self.classes).argmax())
        return Tube(self.track_id, cls, self.masks, float(np.mean(self.scores)))


@dataclass
class FrameResult:
    frame_index: int
    detections: InstanceSet
    track_ids: list[int]
    assignment: Assignment | None
    memory_ids: list[int]


DetectorHook = Callable[[int, object], InstanceSet]
ScorerHook = Callable[[list, InstanceSet, list], list]


def _decode_masks(model: Model, fused, dets: InstanceSet, full_hw) -> None:
    """Attach full-resolution boolean masks and filter vectors to detections."""
    if not len(dets):
        return
    _, h, w = fused.shape
    theta_map = controller_forward(model.seg, fused)
    reduced = reduce_channels(model.seg, fused)
    cells = [(min(max(x, 0), w - 1), min(max(y, 0), h - 1)) for x, y in dets.cells]
    theta = filters_at(theta_map, cells)
    logits = mask_forward_batch(reduced, position_maps(cells, h, w), theta).data
    soft = np.repeat(np.repeat(1.0 / (1.0 + np.exp(-logits)), STRIDE, axis=1), STRIDE, axis=2)
    for i, det in enumerate(dets):
        det.mask = soft[i, : full_hw[0], : full_hw[1]] > 0.5
        det.filters = theta.data[i].copy()


def infer_video(model: Model, video, config: Config | None = None, detector: DetectorHook | None = None,
                edge_scorer: ScorerHook | None = None, frame_log: list | None = None) -> list[Tube]:
    """Online pairwise tracking over a video; returns one Tube per identity.

    ``detector(frame_index, det_maps)`` replaces peak decoding and
    ``edge_scorer(k_detections, t_detections, pairs)`` replaces the edge
    classifier; both exist so the association logic can be driven directly.
    """
    cfg = model.config if config is None else config
    frames = video.frames if isinstance(video, Video) else np.asarray(video)
    full_hw = frames.shape[2:]
    tracks: dict[int, _Track] = {}
    active: list[int] = []           # matched in the previous frame
    memory = TrackMemory()
    next_id = 1
    prev_feat = None
    for t, image in enumerate(frames):
        feat = backbone_forward(model.backbone, image)
        memory = memory_update(memory, [], t, cfg.delta_t)

        k_ids = list(active) + [i for i in memory.ids() if i not in active]
        k_dets = []
        k_nodes = InstanceSet()
        for i in k_ids:
            if i in memory:
                e = memory.entries[i]
                k_dets.append(e.detection)
                k_nodes.append(Detection(e.class_id, 1.0, box_center(e.last_box), e.last_box,
                                         instance_id=i, feature=e.feature))
            else:
                last = tracks[i].last
                k_dets.append(last)
                k_nodes.append(Detection(last.class_id, last.score, last.center, last.box, instance_id=i))

        graph = None
        if t > 0 and len(k_nodes):
            graph = build_graph(k_nodes, prev_feat, feat, cfg.w, cfg.crop)
            crops = graph.k_feat.data.copy()
            graph = message_pass(graph, model.n_e, model.n_v, cfg.L)
            fused = aggregate_feature(graph)
        else:
            crops = np.zeros((0, cfg.D))
            fused = feat

        maps = detect_forward(model.det, fused)
        dets = decode_detections(maps, cfg.top_k, cfg.tau_det) if detector is None else detector(t, maps)
        _decode_masks(model, fused, dets, full_hw)

        if graph is not None and len(dets):
            pruned = prune_edges(graph, dets, [n.class_id for n in k_nodes])
            pairs = [(int(k), int(d)) for k, d in zip(pruned.k_index, pruned.det_index)]
            if edge_scorer is None:
                feats = ad.gather_rows(graph.edge_feat, pruned.edge_index) if pairs else Tensor(np.zeros((0, cfg.D)))
                probs = classify_edges(feats, model.edge_cls).data.tolist()
            else:
                probs = list(edge_scorer(k_dets, dets, pairs))
            scores = [EdgeScore(k_ids[k], d, float(s)) for (k, d), s in zip(pairs, probs)]
            assignment = resolve_associations(scores, cfg.tau_assoc, k_ids, len(dets))
        else:
            assignment = Assignment([], list(range(len(dets))), list(k_ids))

        frame_ids = [0] * len(dets)
        for k_id, d in assignment.matched:
            frame_ids[d] = k_id
            memory.entries.pop(k_id, None)
        for d in assignment.new_tracks:
            frame_ids[d] = next_id
            tracks[next_id] = _Track(next_id)
            next_id += 1
        for d, tid in enumerate(frame_ids):
            det = dets[d]
            tr = tracks[tid]
            tr.classes.append(det.class_id)
            tr.scores.append(det.score)
            tr.masks[t] = det.mask
            tr.last = det

        lost = []
        for k_id in assignment.unmatched_k:
            if k_id in active:
                idx = k_ids.index(k_id)
                last = tracks[k_id].last
                filt = last.filters if last.filters is not None else np.zeros(FILTER_SIZE)
                lost.append(MemoryEntry(k_id, crops[idx], filt, last.class_id, last.box, t, last))
        memory = memory_update(memory, lost, t, cfg.delta_t)
        active = frame_ids
        prev_feat = feat
        if frame_log is not None:
            frame_log.append(FrameResult(t, dets, list(frame_ids), assignment, memory.ids()))
    return [tracks[i].to_tube() for i in sorted(tracks)]

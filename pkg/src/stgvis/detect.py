"""Centre-point detection on the aggregated feature map.

Three parallel conv heads predict a per-class centre heatmap, box size and
sub-cell centre offset. Training uses the penalty-reduced focal loss on the
heatmap plus L1 on size/offset at ground-truth centre cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ConvParams
from .structures import Detection, InstanceSet

HEAT_EPS = 1e-4
FOCAL_ALPHA = 2
FOCAL_BETA = 4
HEAT_PRIOR_BIAS = -2.19  # sigmoid(-2.19) ~ 0.1


@dataclass
class DetMaps:
    heat: Tensor      # C x H x W, after sigmoid
    size: Tensor      # 2 x H x W, (w, h) in cells
    offset: Tensor    # 2 x H x W, (dx, dy)


@dataclass
class DetectHead:
    heat: tuple[ConvParams, ConvParams]
    size: tuple[ConvParams, ConvParams]
    offset: tuple[ConvParams, ConvParams]

    @classmethod
    def init(cls, rng, dim: int, num_classes: int, hidden: int = 32) -> "DetectHead":
        def branch(name, out, bias=0.0):
            return (ConvParams.init(rng, dim, hidden, 3, f"{name}.0"),
                    ConvParams.init(rng, hidden, out, 1, f"{name}.1", std=0.01, bias=bias))
        return cls(branch("det.heat", num_classes, HEAT_PRIOR_BIAS),
                   branch("det.size", 2), branch("det.offset", 2))

    @property
    def num_classes(self) -> int:
        return self.heat[1].weight.shape[0]

    def named(self, prefix: str = "det") -> dict[str, Tensor]:
        out = {}
        for key in ("heat", "size", "offset"):
            for i, conv in enumerate(getattr(self, key)):
                out.update(conv.named(f"{prefix}.{key}.{i}"))
        return out


def detect_forward(head: DetectHead, feat) -> DetMaps:
    def run(branch):
        first, second = branch
        return second(ad.relu(first(feat)))
    return DetMaps(ad.sigmoid(run(head.heat)), run(head.size), run(head.offset))


# ------------------------------------------------------------------- targets

def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest corner shift keeping IoU >= min_overlap (CenterNet's three cases)."""
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + np.sqrt(b1**2 - 4 * c1)) / 2
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + np.sqrt(b2**2 - 16 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + np.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return float(min(r1, r2, r3))


def draw_gaussian(heat: np.ndarray, cx: int, cy: int, radius: int) -> None:
    """Max-composite a gaussian bump (peak exactly 1) at cell (cx, cy)."""
    h, w = heat.shape
    sigma = (2 * radius + 1) / 6.0
    ys, xs = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    g[g < np.finfo(float).eps * g.max()] = 0
    left, right = min(cx, radius), min(w - cx, radius + 1)
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    region = heat[cy - top : cy + bottom, cx - left : cx + right]
    patch = g[radius - top : radius + bottom, radius - left : radius + right]
    np.maximum(region, patch, out=region)


@dataclass
class DetTargets:
    heat: np.ndarray      # C x H x W
    cells: np.ndarray     # (N, 2) integer x, y
    size: np.ndarray      # (N, 2) w, h
    offset: np.ndarray    # (N, 2)
    classes: np.ndarray   # (N,)

    @property
    def count(self) -> int:
        return len(self.cells)


def encode_targets(gt: InstanceSet, num_classes: int, grid: tuple[int, int],
                   gaussian: bool = True) -> DetTargets:
    h, w = grid
    heat = np.zeros((num_classes, h, w))
    cells, sizes, offsets, classes = [], [], [], []
    for inst in gt:
        x1, y1, x2, y2 = inst.box
        cx, cy = inst.center
        ix = min(max(int(np.floor(cx)), 0), w - 1)
        iy = min(max(int(np.floor(cy)), 0), h - 1)
        radius = max(0, int(gaussian_radius(y2 - y1, x2 - x1))) if gaussian else 0
        draw_gaussian(heat[inst.class_id], ix, iy, radius)
        cells.append((ix, iy))
        sizes.append((x2 - x1, y2 - y1))
        offsets.append((cx - ix, cy - iy))
        classes.append(inst.class_id)
    return DetTargets(heat, np.array(cells, dtype=np.int64).reshape(-1, 2),
                      np.array(sizes, dtype=float).reshape(-1, 2),
                      np.array(offsets, dtype=float).reshape(-1, 2),
                      np.array(classes, dtype=np.int64))


def encode_maps(targets: DetTargets) -> DetMaps:
    """Write targets into DetMaps form (for round-trip checks and stubs)."""
    _, h, w = targets.heat.shape
    size = np.zeros((2, h, w))
    offset = np.zeros((2, h, w))
    for (x, y), s, o in zip(targets.cells, targets.size, targets.offset):
        size[:, y, x] = s
        offset[:, y, x] = o
    return DetMaps(Tensor(targets.heat.copy()), Tensor(size), Tensor(offset))


# ---------------------------------------------------------------------- loss

def focal_loss(heat, target: np.ndarray) -> Tensor:
    p = ad.clamp(heat, HEAT_EPS, 1 - HEAT_EPS)
    pos = (target == 1.0).astype(float)
    neg_w = (1.0 - target) ** FOCAL_BETA * (1.0 - pos)
    one_minus = ad.sub(1.0, p)
    pos_term = ad.mul(ad.mul(ad.log(p), ad.mul(one_minus, one_minus)), pos)
    neg_term = ad.mul(ad.mul(ad.log(one_minus), ad.mul(p, p)), neg_w)
    num_pos = max(pos.sum(), 1.0)
    return ad.scale(ad.add(ad.sum_(pos_term), ad.sum_(neg_term)), -1.0 / num_pos)


def reg_l1(pred, cells: np.ndarray, values: np.ndarray) -> Tensor:
    """Sum over both channels of |pred - value| at the cells, divided by N."""
    if len(cells) == 0:
        return Tensor(0.0)
    picked = ad.index(pred, (slice(None), cells[:, 1], cells[:, 0]))  # 2 x N
    diff = ad.sub(picked, values.T)
    return ad.scale(ad.sum_(ad.abs_(diff)), 1.0 / len(cells))


def detect_loss(maps: DetMaps, targets: DetTargets, lambda_size: float = 0.1,
                lambda_offset: float = 1.0) -> tuple[Tensor, dict]:
    """Total detection loss and its named parts."""
    center = focal_loss(maps.heat, targets.heat)
    size = reg_l1(maps.size, targets.cells, targets.size)
    offset = reg_l1(maps.offset, targets.cells, targets.offset)
    total = ad.add(center, ad.add(ad.scale(size, lambda_size), ad.scale(offset, lambda_offset)))
    return total, {"center": center.item(), "size": size.item(), "offset": offset.item()}


# -------------------------------------------------------------------- decode

def _peaks(heat: np.ndarray) -> np.ndarray:
    padded = np.pad(heat, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    return heat == win.max(axis=(-1, -2))


def decode_detections(maps: DetMaps, top_k: int = 20, threshold: float = 0.3,
                      min_size: float = 0.5) -> InstanceSet:
    """3x3 peak picking, top-k by score, score >= threshold."""
    heat = maps.heat.data if isinstance(maps.heat, Tensor) else np.asarray(maps.heat)
    size = maps.size.data if isinstance(maps.size, Tensor) else np.asarray(maps.size)
    offset = maps.offset.data if isinstance(maps.offset, Tensor) else np.asarray(maps.offset)
    c, h, w = heat.shape
    scores = np.where(_peaks(heat), heat, -1.0).ravel()
    order = np.lexsort((np.arange(scores.size), -scores))[:top_k]
    out = InstanceSet()
    for flat in order:
        s = scores[flat]
        if s < threshold:
            break
        cls, rem = divmod(int(flat), h * w)
        y, x = divmod(rem, w)
        cx, cy = x + offset[0, y, x], y + offset[1, y, x]
        bw, bh = max(size[0, y, x], min_size), max(size[1, y, x], min_size)
        x1, x2 = max(cx - bw / 2, 0.0), min(cx + bw / 2, float(w))
        y1, y2 = max(cy - bh / 2, 0.0), min(cy + bh / 2, float(h))
        if x2 <= x1 or y2 <= y1:
            continue
        out.append(Detection(class_id=cls, score=float(s), center=(float(cx), float(cy)),
                             box=(float(x1), float(y1), float(x2), float(y2)),
                             peak=(x, y)))
    return out

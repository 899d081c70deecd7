"""Dynamic-filter mask branch and reference-to-target filter warping.

A controller head predicts 169 numbers per location; unpacked, they are the
weights and biases of a three-layer 1x1-conv mask head applied to
``[reduced features (8), relative position (2)]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import ConvParams, deformable_conv

REDUCED_CHANNELS = 8
MASK_IN = REDUCED_CHANNELS + 2
# (out, in) of the three dynamic 1x1 convs
DYNAMIC_LAYERS = ((8, MASK_IN), (8, 8), (1, 8))
FILTER_SIZE = sum(o * i + o for o, i in DYNAMIC_LAYERS)  # 169
DICE_EPS = 1e-5


def _layer_slices():
    out, pos = [], 0
    for o, i in DYNAMIC_LAYERS:
        out.append(((pos, pos + o * i), (pos + o * i, pos + o * i + o), (o, i)))
        pos += o * i + o
    return out


_SLICES = _layer_slices()


def pack_filters(layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """[(W1, b1), (W2, b2), (W3, b3)] -> flat 169-vector, layer by layer."""
    parts = []
    for (w, b), (_, _, shape) in zip(layers, _SLICES):
        if w.shape != shape or b.shape != (shape[0],):
            raise ValueError(f"dynamic layer expects W{shape}, b({shape[0]},); got {w.shape}, {b.shape}")
        parts += [w.ravel(), b.ravel()]
    return np.concatenate(parts)


def unpack_filters(theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    theta = np.asarray(theta)
    if theta.shape[-1] != FILTER_SIZE:
        raise ValueError(f"expected {FILTER_SIZE} filter values, got {theta.shape}")
    return [(theta[..., a:b].reshape(theta.shape[:-1] + shape), theta[..., c:d])
            for (a, b), (c, d), shape in _SLICES]


def init_dynamic_filters(rng: np.random.Generator) -> np.ndarray:
    layers = []
    for o, i in DYNAMIC_LAYERS:
        layers.append((rng.normal(0, np.sqrt(2.0 / i), size=(o, i)), np.zeros(o)))
    return pack_filters(layers)


# ---------------------------------------------------------------- controller

@dataclass
class SegHead:
    controller: tuple[ConvParams, ConvParams]
    reducer: ConvParams

    @classmethod
    def init(cls, rng, dim: int, hidden: int = 32) -> "SegHead":
        first = ConvParams.init(rng, dim, hidden, 3, "seg.controller.0")
        second = ConvParams.init(rng, hidden, FILTER_SIZE, 1, "seg.controller.1", std=0.01)
        # start every location from one sensible dynamic network
        second.bias.data = init_dynamic_filters(rng)
        return cls((first, second), ConvParams.init(rng, dim, REDUCED_CHANNELS, 1, "seg.reducer"))

    def named(self, prefix: str = "seg") -> dict[str, Tensor]:
        out = {}
        for i, conv in enumerate(self.controller):
            out.update(conv.named(f"{prefix}.controller.{i}"))
        out.update(self.reducer.named(f"{prefix}.reducer"))
        return out


def controller_forward(head: SegHead, feat) -> Tensor:
    """169 x H x W filter map."""
    first, second = head.controller
    return second(ad.relu(first(feat)))


def reduce_channels(head: SegHead, feat) -> Tensor:
    return head.reducer(feat)


def position_map(center, h: int, w: int) -> np.ndarray:
    """Relative offsets of every cell from ``center`` = (x, y), scaled by max(H, W)."""
    s = float(max(h, w))
    cols = np.arange(w, dtype=float)[None, :].repeat(h, 0)
    rows = np.arange(h, dtype=float)[:, None].repeat(w, 1)
    return np.stack([(cols - center[0]) / s, (rows - center[1]) / s])


def filters_at(filter_map, cells) -> Tensor:
    """Pick the 169-vectors at integer cells [(x, y), ...] -> N x 169."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    picked = ad.index(filter_map, (slice(None), cells[:, 1], cells[:, 0]))
    return ad.transpose(picked)


def position_maps(centers, h: int, w: int) -> np.ndarray:
    return np.stack([position_map(c, h, w) for c in centers]).reshape(-1, 2, h, w)


def mask_forward_batch(reduced, pos: np.ndarray, theta) -> Tensor:
    """Dynamic mask head for N instances at once -> N x H x W logits.

    ``reduced`` is 8 x H x W (shared), ``pos`` N x 2 x H x W, ``theta`` N x 169.
    """
    reduced, theta = ad.as_tensor(reduced), ad.as_tensor(theta)
    _, h, w = reduced.shape
    n = theta.shape[0]
    pos = np.asarray(pos, dtype=float).reshape(n, 2, h * w)
    feat = ad.mul(ad.reshape(reduced, (1, REDUCED_CHANNELS, h * w)), np.ones((n, 1, 1)))
    x = ad.concat([feat, Tensor(pos)], axis=1)
    last = len(_SLICES) - 1
    for i, ((a, b), (c, d), shape) in enumerate(_SLICES):
        wgt = ad.reshape(ad.index(theta, (slice(None), slice(a, b))), (n,) + shape)
        bias = ad.reshape(ad.index(theta, (slice(None), slice(c, d))), (n, shape[0], 1))
        x = ad.add(ad.matmul(wgt, x), bias)
        if i < last:
            x = ad.relu(x)
    return ad.reshape(x, (n, h, w))


def mask_forward(reduced, pos: np.ndarray, theta) -> Tensor:
    """One instance: concat [reduced, pos] -> three dynamic 1x1 convs -> H x W logits."""
    theta = ad.as_tensor(theta)
    _, h, w = ad.as_tensor(reduced).shape
    out = mask_forward_batch(reduced, np.asarray(pos)[None], ad.reshape(theta, (1, FILTER_SIZE)))
    return ad.reshape(out, (h, w))


# -------------------------------------------------------------------- warping

@dataclass
class WarpParams:
    offset_head: tuple[ConvParams, ConvParams]
    kernel: Tensor  # 3 x 3, shared by all 169 channels

    @classmethod
    def init(cls, rng, dim: int, hidden: int = 32) -> "WarpParams":
        kernel = np.zeros((3, 3))
        kernel[1, 1] = 1.0
        return cls((ConvParams.init(rng, dim, hidden, 3, "warp.offset.0"),
                    ConvParams.init(rng, hidden, 18, 3, "warp.offset.1", std=1e-3)),
                   Tensor(kernel, requires_grad=True, name="warp.kernel"))

    def named(self, prefix: str = "warp") -> dict[str, Tensor]:
        out = {}
        for i, conv in enumerate(self.offset_head):
            out.update(conv.named(f"{prefix}.offset.{i}"))
        out[f"{prefix}.kernel"] = self.kernel
        return out


def predict_offsets(p: WarpParams, feat_k, feat_t) -> Tensor:
    first, second = p.offset_head
    return second(ad.relu(first(ad.sub(feat_t, feat_k))))


def warp_filters(p: WarpParams, feat_k, feat_t, theta_k_map, offsets=None) -> Tensor:
    """Deformably resample the reference filter map onto the target frame.

    ``offsets`` overrides the predicted 18 x H x W field when given.
    """
    if offsets is None:
        offsets = predict_offsets(p, feat_k, feat_t)
    return deformable_conv(theta_k_map, p.kernel, offsets)


# ----------------------------------------------------------------------- loss

def dice_loss(pred, gt) -> Tensor:
    """1 - (2 sum p g + eps) / (sum p^2 + sum g^2 + eps)."""
    pred = ad.as_tensor(pred)
    g = np.asarray(gt, dtype=float)
    if pred.shape != g.shape:
        raise ValueError(f"dice shapes differ: {pred.shape} vs {g.shape}")
    inter = ad.sum_(ad.mul(pred, g))
    denom = ad.add(ad.sum_(ad.mul(pred, pred)), float((g * g).sum()) + DICE_EPS)
    ratio = ad.div(ad.add(ad.scale(inter, 2.0), DICE_EPS), denom)
    return ad.sub(1.0, ratio)


"""Network blocks built on the tape: MLP, stride-4 backbone, ROIAlign,
deformable convolution and node-feature flattening."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _param(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _zeros(shape, name: str, value: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


# ------------------------------------------------------------------------ MLP

@dataclass
class MlpParams:
    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("MLP needs one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input {w.shape[0]} does not chain from {self.weights[i - 1].shape[1]}")

    @classmethod
    def init(cls, rng: np.random.Generator, sizes: list[int], name: str = "mlp",
             last_std: float | None = None) -> "MlpParams":
        ws, bs = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = np.sqrt(2.0 / n_in)
            if last_std is not None and i == len(sizes) - 2:
                std = last_std
            ws.append(_param(rng, (n_in, n_out), std, f"{name}.w{i}"))
            bs.append(_zeros((n_out,), f"{name}.b{i}"))
        return cls(ws, bs)

    @property
    def in_features(self) -> int:
        return self.weights[0].shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def mlp_forward(p: MlpParams, x) -> Tensor:
    """Affine+relu layers, final layer affine only.

    ``x`` is a single vector or a ``N x in`` batch of row vectors.
    """
    x = ad.as_tensor(x)
    if x.shape[-1] != p.in_features:
        raise ValueError(f"MLP expects {p.in_features} inputs, got shape {x.shape}")
    vector = x.ndim == 1
    h = ad.reshape(x, (1, -1)) if vector else x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = ad.relu(h)
    return ad.reshape(h, (-1,)) if vector else h


# ------------------------------------------------------------------- backbone

@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, k: int, name: str, stride: int = 1,
             std: float | None = None, bias: float = 0.0) -> "ConvParams":
        std = np.sqrt(2.0 / (c_in * k * k)) if std is None else std
        return cls(_param(rng, (c_out, c_in, k, k), std, f"{name}.weight"),
                   _zeros((c_out,), f"{name}.bias", bias), stride)

    def __call__(self, x) -> Tensor:
        k = self.weight.shape[-1]
        return ad.conv2d(x, self.weight, self.stride, k // 2, self.bias)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


@dataclass
class BackboneParams:
    convs: list[ConvParams] = field(default_factory=list)

    @classmethod
    def init(cls, rng, dim: int, width: int = 16) -> "BackboneParams":
        return cls([
            ConvParams.init(rng, 3, width, 3, "backbone.conv1"),
            ConvParams.init(rng, width, 2 * width, 3, "backbone.conv2", stride=2),
            ConvParams.init(rng, 2 * width, dim, 3, "backbone.conv3", stride=2),
            ConvParams.init(rng, dim, dim, 3, "backbone.conv4"),
        ])

    @property
    def dim(self) -> int:
        return self.convs[-1].weight.shape[0]

    def named(self, prefix: str = "backbone") -> dict[str, Tensor]:
        out = {}
        for i, c in enumerate(self.convs, 1):
            out.update(c.named(f"{prefix}.conv{i}"))
        return out


def backbone_forward(p: BackboneParams, image) -> Tensor:
    """3 x H x W image -> D x H/4 x W/4 features (four conv+relu blocks)."""
    image = ad.as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"backbone expects a 3 x H x W image, got {image.shape}")
    if image.shape[1] % 4 or image.shape[2] % 4:
        raise ValueError(f"image size {image.shape[1]}x{image.shape[2]} is not divisible by 4")
    h = image
    for conv in p.convs:
        h = ad.relu(conv(h))
    return h


# ---------------------------------------------------------------- bilinear

def _bilinear_taps(py: np.ndarray, px: np.ndarray, h: int, w: int):
    """Corner indices/weights for sampling at array coords (py, px).

    Corners outside the map get weight 0 (zero padding). Returns flat indices
    (4, N), weights (4, N) and the per-corner partials d w / d py, d w / d px.
    """
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly, lx = py - y0, px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    ys = np.stack([y0, y0, y0 + 1, y0 + 1])
    xs = np.stack([x0, x0 + 1, x0, x0 + 1])
    wy = np.stack([1 - ly, 1 - ly, ly, ly])
    wx = np.stack([1 - lx, lx, 1 - lx, lx])
    dwy = np.stack([-np.ones_like(ly), -np.ones_like(ly), np.ones_like(ly), np.ones_like(ly)])
    dwx = np.stack([-np.ones_like(lx), np.ones_like(lx), -np.ones_like(lx), np.ones_like(lx)])
    valid = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    flat = np.where(valid, np.clip(ys, 0, h - 1) * w + np.clip(xs, 0, w - 1), 0)
    weight = wy * wx * valid
    d_py = dwy * wx * valid
    d_px = wy * dwx * valid
    return flat, weight, d_py, d_px


# ------------------------------------------------------------------- ROIAlign

def roi_align_matrix(box, h: int, w: int, out: int = 3) -> np.ndarray:
    """Sparse-as-dense ``(out*out) x (h*w)`` interpolation matrix for one box.

    Boxes are (x1, y1, x2, y2) in continuous feature coordinates where pixel
    (r, c) covers [c, c+1) x [r, r+1). One sample per output cell centre.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    x1, x2 = np.clip([x1, x2], 0.0, w)
    y1, y2 = np.clip([y1, y2], 0.0, h)
    if x2 - x1 < 1e-3:
        x1, x2 = min(x1, w - 1.0), min(x1, w - 1.0) + 1.0
    if y2 - y1 < 1e-3:
        y1, y2 = min(y1, h - 1.0), min(y1, h - 1.0) + 1.0
    t = (np.arange(out) + 0.5) / out
    sy = y1 + t * (y2 - y1) - 0.5
    sx = x1 + t * (x2 - x1) - 0.5
    py, px = np.meshgrid(np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1), indexing="ij")
    flat, weight, _, _ = _bilinear_taps(py.ravel(), px.ravel(), h, w)
    mat = np.zeros((out * out, h * w))
    rows = np.broadcast_to(np.arange(out * out), flat.shape)
    np.add.at(mat, (rows, flat), weight)
    return mat


def roi_align(feature, box, out: int = 3) -> Tensor:
    """Bilinear crop of ``D x H x W`` features to ``D x out x out``; clamps boxes to the map."""
    feature = ad.as_tensor(feature)
    d, h, w = feature.shape
    mat = roi_align_matrix(box, h, w, out)
    flat = ad.reshape(feature, (d, h * w))
    return ad.reshape(ad.matmul(flat, Tensor(mat.T.copy())), (d, out, out))


def flatten_node_feature(patch) -> Tensor:
    """Per-channel spatial mean: ``D x out x out`` -> ``D``."""
    patch = ad.as_tensor(patch)
    return ad.mean(ad.reshape(patch, (patch.shape[0], -1)), axis=1)


# ----------------------------------------------------------- deformable conv

# tap order is row-major over (ky, kx) in {-1, 0, 1}^2
_TAPS = [(ky, kx) for ky in (-1, 0, 1) for kx in (-1, 0, 1)]


def _tap_geometry(offsets: np.ndarray, h: int, w: int):
    """Bilinear corners of all 9 taps displaced by an ``18 x H x W`` offset field."""
    gy, gx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    off = offsets.reshape(9, 2, h * w)
    ky = np.array([t[0] for t in _TAPS], dtype=float)[:, None]
    kx = np.array([t[1] for t in _TAPS], dtype=float)[:, None]
    py = gy.ravel()[None] + ky + off[:, 1]
    px = gx.ravel()[None] + kx + off[:, 0]
    return _bilinear_taps(py, px, h, w)


def deform_sample(x, offsets) -> Tensor:
    """Sample each of the 9 taps at grid + tap + learned offset.

    ``offsets`` is ``18 x H x W`` with channels (2k, 2k+1) = (dx, dy) of tap k.
    Returns ``C x 9 x H x W``; out-of-bounds reads are zero. Differentiable
    with respect to both ``x`` and ``offsets``.
    """
    x, offsets = ad.as_tensor(x), ad.as_tensor(offsets)
    c, h, w = x.shape
    if offsets.shape != (18, h, w):
        raise ValueError(f"offsets must be 18 x {h} x {w}, got {offsets.shape}")
    flat, weight, d_py, d_px = _tap_geometry(offsets.data, h, w)  # each (4, 9, HW)
    xf = x.data.reshape(c, h * w)
    vals = xf[:, flat]  # (C, 4, 9, HW)
    out = (vals * weight).sum(axis=1)

    def bw(g):
        g = g.reshape(c, 9, h * w)
        contrib = g[:, None] * weight[None]  # (C, 4, 9, HW)
        # scatter-add every (channel, target pixel) pair in one bincount
        target = (np.arange(c)[:, None] * (h * w) + flat.reshape(1, -1)).ravel()
        gx_ = np.bincount(target, weights=contrib.ravel(), minlength=c * h * w).reshape(c, h * w)
        gv = (vals * g[:, None]).sum(axis=0)  # (4, 9, HW)
        goff = np.empty((9, 2, h * w))
        goff[:, 0] = (gv * d_px).sum(axis=0)
        goff[:, 1] = (gv * d_py).sum(axis=0)
        return gx_.reshape(c, h, w), goff.reshape(18, h, w)

    return ad.custom_op(out.reshape(c, 9, h, w), (x, offsets), bw)


# largest H*W for which the depthwise path builds a dense HW x HW sampling matrix
DENSE_SAMPLING_LIMIT = 1024


def _deform_depthwise(x: Tensor, kernel: Tensor, offsets: Tensor) -> Tensor:
    """Shared-kernel deformable conv as ``x @ S.T`` with S the HW x HW sampling matrix.

    Row n of S holds sum_k kernel_k * bilinear weights of tap k at pixel n, so
    every channel is warped by one matrix product.
    """
    c, h, w = x.shape
    n = h * w
    if offsets.shape != (18, h, w):
        raise ValueError(f"offsets must be 18 x {h} x {w}, got {offsets.shape}")
    flat, weight, d_py, d_px = _tap_geometry(offsets.data, h, w)  # each (4, 9, HW)
    kern = kernel.data.reshape(1, 9, 1)
    rows = np.broadcast_to(np.arange(n), flat.shape)
    cell = (rows * n + flat).ravel()
    smat = np.bincount(cell, weights=(weight * kern).ravel(), minlength=n * n).reshape(n, n)
    xf = x.data.reshape(c, n)
    out = xf @ smat.T

    def bw(g):
        g = g.reshape(c, n)
        gx = g @ smat
        # dL/dS[n, m] = sum_c g[c, n] x[c, m], read back at every tap corner
        gs = (g.T @ xf)[rows, flat]  # (4, 9, HW)
        gk = (gs * weight).sum(axis=(0, 2))
        goff = np.empty((9, 2, n))
        goff[:, 0] = (gs * d_px * kern).sum(axis=0)
        goff[:, 1] = (gs * d_py * kern).sum(axis=0)
        return gx.reshape(c, h, w), gk.reshape(3, 3), goff.reshape(18, h, w)

    return ad.custom_op(out.reshape(c, h, w), (x, kernel, offsets), bw)


def deformable_conv(x, weights, offsets, bias=None) -> Tensor:
    """3x3 deformable convolution, stride 1, same size output.

    ``weights`` is either ``C_out x C_in x 3 x 3`` (dense) or ``3 x 3``
    (one spatial kernel shared by every channel, applied depthwise).
    """
    x, weights = ad.as_tensor(x), ad.as_tensor(weights)
    c, h, w = x.shape
    if weights.shape == (3, 3) and h * w <= DENSE_SAMPLING_LIMIT:
        out = _deform_depthwise(x, weights, ad.as_tensor(offsets))
    elif weights.shape == (3, 3):
        cols = deform_sample(x, offsets)
        out = ad.sum_(ad.mul(cols, ad.reshape(weights, (1, 9, 1, 1))), axis=1)
    else:
        cols = deform_sample(x, offsets)
        if weights.shape[1:] != (c, 3, 3):
            raise ValueError(f"deformable weights {weights.shape} do not match input {x.shape}")
        wm = ad.reshape(weights, (weights.shape[0], c * 9))
        out = ad.reshape(ad.matmul(wm, ad.reshape(cols, (c * 9, h * w))), (weights.shape[0], h, w))
    if bias is not None:
        out = ad.add(out, ad.reshape(bias, (-1, 1, 1)))
    return out

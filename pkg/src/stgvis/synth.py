"""Synthetic videos of moving, occluding shapes with full ground truth.

Frames are 3 x H x W float arrays whose values are multiples of 1/255, so
they survive the PPM round trip exactly. Later shapes in ``SceneSpec.shapes``
are drawn over earlier ones; hidden intervals drop a shape (and its
annotation) from those frames.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import MaskRLE, rle_decode, rle_encode

CLASS_IDS = {"disc": 0, "square": 1, "triangle": 2}
CLASS_NAMES = {v: k for k, v in CLASS_IDS.items()}


@dataclass
class ShapeSpec:
    kind: str
    size: float                       # radius / half side, pixels
    position: tuple[float, float]     # initial centre (x, y), pixels
    velocity: tuple[float, float]     # pixels per frame
    color: tuple[int, int, int]
    hidden: list[tuple[int, int]] = field(default_factory=list)  # [start, stop) frames

    def is_hidden(self, frame: int) -> bool:
        return any(a <= frame < b for a, b in self.hidden)


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    num_frames: int = 8
    shapes: list[ShapeSpec] = field(default_factory=list)
    background: int = 20
    noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0 or self.num_frames <= 0:
            raise ValueError("canvas and frame count must be positive")
        for i, s in enumerate(self.shapes):
            if s.kind not in CLASS_IDS:
                raise ValueError(f"shape {i}: unknown kind {s.kind!r}")
            if s.size <= 0:
                raise ValueError(f"shape {i}: zero-area shape (size {s.size})")
            if 2 * s.size + 2 > min(self.height, self.width):
                raise ValueError(f"shape {i}: size {s.size} does not fit a {self.height}x{self.width} canvas")


@dataclass
class Annotation:
    instance_id: int
    class_id: int
    box: tuple[int, int, int, int]   # x1, y1, x2, y2 pixels, x2/y2 exclusive
    mask: np.ndarray                 # bool H x W


@dataclass
class Video:
    name: str
    frames: np.ndarray                       # T x 3 x H x W
    annotations: list[list[Annotation]]      # per frame

    @property
    def num_frames(self) -> int:
        return len(self.frames)


@dataclass
class VideoDataset:
    videos: list[Video] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    def __getitem__(self, i):
        return self.videos[i]


# ----------------------------------------------------------------- generation

def trajectory(shape: ShapeSpec, num_frames: int, height: int, width: int) -> np.ndarray:
    """Centres per frame, reflecting the velocity to keep the shape >= 1 px inside."""
    lo_x, hi_x = 1 + shape.size, width - 1 - shape.size
    lo_y, hi_y = 1 + shape.size, height - 1 - shape.size
    x, y = np.clip(shape.position[0], lo_x, hi_x), np.clip(shape.position[1], lo_y, hi_y)
    vx, vy = shape.velocity
    out = np.zeros((num_frames, 2))
    for f in range(num_frames):
        out[f] = (x, y)
        x, y = x + vx, y + vy
        if x < lo_x or x > hi_x:
            vx = -vx
            x = 2 * (lo_x if x < lo_x else hi_x) - x
        if y < lo_y or y > hi_y:
            vy = -vy
            y = 2 * (lo_y if y < lo_y else hi_y) - y
    return out


def rasterize(kind: str, center, size: float, height: int, width: int) -> np.ndarray:
    py, px = np.mgrid[0:height, 0:width] + 0.5
    cx, cy = center
    if kind == "disc":
        return (px - cx) ** 2 + (py - cy) ** 2 <= size * size
    if kind == "square":
        return (np.abs(px - cx) <= size) & (np.abs(py - cy) <= size)
    if kind == "triangle":
        top = cy - size
        return (py <= cy + size) & (py >= top) & (np.abs(px - cx) <= (py - top) / 2)
    raise ValueError(f"unknown shape kind {kind!r}")


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def generate_video(spec: SceneSpec, name: str = "video_0000") -> Video:
    spec.validate()
    h, w, t = spec.height, spec.width, spec.num_frames
    rng = np.random.default_rng(spec.seed)
    paths = [trajectory(s, t, h, w) for s in spec.shapes]
    frames = np.zeros((t, 3, h, w))
    annotations = []
    for f in range(t):
        img = np.full((3, h, w), float(spec.background))
        masks = []
        for s, path in zip(spec.shapes, paths):
            if s.is_hidden(f):
                masks.append(None)
                continue
            m = rasterize(s.kind, path[f], s.size, h, w)
            for prev in masks:
                if prev is not None:
                    prev &= ~m
            img[:, m] = np.asarray(s.color, dtype=float)[:, None]
            masks.append(m)
        if spec.noise > 0:
            img = img + rng.normal(0.0, spec.noise * 255.0, size=img.shape)
        frames[f] = np.clip(np.round(img), 0, 255) / 255.0
        anns = []
        for i, (s, m) in enumerate(zip(spec.shapes, masks)):
            if m is None or not m.any():
                continue
            anns.append(Annotation(i + 1, CLASS_IDS[s.kind], mask_box(m), m))
        annotations.append(anns)
    return Video(name, frames, annotations)


PRESETS = {
    # 2 classes, <= 3 instances, no scripted occlusion
    "easy": dict(kinds=("disc", "square"), shapes=(1, 3), frames=(8, 12), size=(9.0, 13.0),
                 speed=1.5, occlusion=0.0, noise=0.0),
    "default": dict(kinds=("disc", "square", "triangle"), shapes=(2, 4), frames=(8, 16),
                    size=(6.0, 11.0), speed=2.0, occlusion=0.3, noise=0.02),
}


def _distinct_colors(rng: np.random.Generator, n: int) -> list[tuple[int, int, int]]:
    hues = (rng.uniform() + np.arange(n) / max(n, 1)) % 1.0
    out = []
    for hue in hues:
        k = (np.array([5.0, 3.0, 1.0]) + hue * 6) % 6
        rgb = 1 - np.clip(np.minimum(k, 4 - k), 0, 1)
        out.append(tuple(int(v) for v in np.round(60 + 195 * rgb)))
    return out


def random_scene(rng: np.random.Generator, preset: str = "easy", height: int = 64,
                 width: int = 64) -> SceneSpec:
    cfg = PRESETS[preset]
    n_frames = int(rng.integers(cfg["frames"][0], cfg["frames"][1] + 1))
    n_shapes = int(rng.integers(cfg["shapes"][0], cfg["shapes"][1] + 1))
    colors = _distinct_colors(rng, n_shapes)
    shapes = []
    for i in range(n_shapes):
        size = float(rng.uniform(*cfg["size"]))
        pos = (float(rng.uniform(size + 1, width - size - 1)), float(rng.uniform(size + 1, height - size - 1)))
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.3, 1.0) * cfg["speed"]
        hidden = []
        if rng.uniform() < cfg["occlusion"] and n_frames > 4:
            start = int(rng.integers(1, n_frames - 2))
            hidden.append((start, start + int(rng.integers(1, 4))))
        shapes.append(ShapeSpec(str(rng.choice(cfg["kinds"])), size, pos,
                                (float(speed * np.cos(angle)), float(speed * np.sin(angle))),
                                colors[i], hidden))
    return SceneSpec(height, width, n_frames, shapes, noise=cfg["noise"], seed=int(rng.integers(2**31)))


def make_dataset(num_videos: int, seed: int = 0, preset: str = "easy", height: int = 64,
                 width: int = 64) -> VideoDataset:
    rng = np.random.default_rng(seed)
    return VideoDataset([generate_video(random_scene(rng, preset, height, width), f"video_{i:04d}")
                         for i in range(num_videos)])


# ------------------------------------------------------------------------- I/O

def write_ppm(path, image: np.ndarray) -> None:
    """3 x H x W floats in [0, 1] -> binary P6."""
    _, h, w = image.shape
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header at offset {pos}")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: expected P6 magic at offset 0, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PPM header before offset {pos}") from None
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported (offset {pos})")
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise ValueError(f"{path}: pixel data truncated at offset {len(buf)}, expected {need} bytes from {pos}")
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_dataset(ds: VideoDataset, directory) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for i, video in enumerate(ds):
        vdir = root / f"video_{i:04d}"
        vdir.mkdir(exist_ok=True)
        for f, frame in enumerate(video.frames):
            write_ppm(vdir / f"frame_{f:04d}.ppm", frame)
        _, _, h, w = video.frames.shape
        doc = {"name": video.name, "height": h, "width": w, "num_frames": video.num_frames,
               "frames": [{"frame_index": f, "instances": [
                   {"id": a.instance_id, "class": a.class_id, "box": list(a.box),
                    "mask": rle_encode(a.mask).to_string()} for a in anns]}
                   for f, anns in enumerate(video.annotations)]}
        (vdir / "annotations.json").write_text(json.dumps(doc, indent=1))


def read_dataset(directory) -> VideoDataset:
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    videos = []
    for vdir in sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("video_")):
        ann_path = vdir / "annotations.json"
        if not ann_path.exists():
            raise FileNotFoundError(f"{vdir.name}: missing annotations.json")
        try:
            doc = json.loads(ann_path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{ann_path}: malformed JSON at offset {exc.pos}: {exc.msg}") from None
        frames = np.stack([read_ppm(vdir / f"frame_{f:04d}.ppm") for f in range(doc["num_frames"])])
        annotations = []
        for fr in sorted(doc["frames"], key=lambda d: d["frame_index"]):
            annotations.append([Annotation(int(a["id"]), int(a["class"]), tuple(int(v) for v in a["box"]),
                                           rle_decode(MaskRLE.from_string(a["mask"])))
                                for a in fr["instances"]])
        videos.append(Video(doc.get("name", vdir.name), frames, annotations))
    return VideoDataset(videos)


def datasets_equal(a: VideoDataset, b: VideoDataset) -> bool:
    if len(a) != len(b):
        return False
    for va, vb in zip(a, b):
        if va.name != vb.name or va.frames.shape != vb.frames.shape or not np.array_equal(va.frames, vb.frames):
            return False
        if len(va.annotations) != len(vb.annotations):
            return False
        for fa, fb in zip(va.annotations, vb.annotations):
            if len(fa) != len(fb):
                return False
            for x, y in zip(fa, fb):
                if (x.instance_id, x.class_id, tuple(x.box)) != (y.instance_id, y.class_id, tuple(y.box)):
                    return False
                if not np.array_equal(x.mask, y.mask):
                    return False
    return True

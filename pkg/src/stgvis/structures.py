"""Per-frame instance records shared by the heads, the tracker and the pipeline.

Coordinates are in feature-map units (input pixels / stride) unless a field
name says otherwise. Feature cell (r, c) covers [c, c+1) x [r, r+1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


@dataclass
class Detection:
    class_id: int
    score: float
    center: tuple[float, float]
    box: tuple[float, float, float, float]
    instance_id: int | None = None
    mask: np.ndarray | None = None
    filters: np.ndarray | None = None
    feature: np.ndarray | None = None
    peak: tuple[int, int] | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")

    @property
    def cell(self) -> tuple[int, int]:
        if self.peak is not None:
            return self.peak
        return int(np.floor(self.center[0])), int(np.floor(self.center[1]))


@dataclass
class InstanceSet:
    items: list[Detection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Detection]:
        return iter(self.items)

    def __getitem__(self, i: int) -> Detection:
        return self.items[i]

    def append(self, det: Detection) -> None:
        self.items.append(det)

    @property
    def centers(self) -> np.ndarray:
        return np.array([d.center for d in self.items], dtype=float).reshape(-1, 2)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([d.box for d in self.items], dtype=float).reshape(-1, 4)

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([d.class_id for d in self.items], dtype=np.int64)

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [d.cell for d in self.items]


def box_center(box) -> tuple[float, float]:
    x1, y1, x2, y2 = box
    return (0.5 * (x1 + x2), 0.5 * (y1 + y2))

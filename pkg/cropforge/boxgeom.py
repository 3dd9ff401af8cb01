"""Rectangle math in normalized image coordinates.

Boxes are stored as (cx, cy, w, h). Corner accessors derive (x1, y1, x2, y2)
on demand. Areas are always computed from the corner form so that a box
compared with itself yields an IoU of exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import BoxError

SIZE_FLOOR = 1e-4


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box":
        if len(values) != 4:
            raise BoxError(f"a box needs 4 values, got {len(values)}")
        cx, cy, w, h = (float(v) for v in values)
        return cls(cx, cy, w, h)

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2.0

    def corners(self) -> tuple[float, float, float, float]:
        return self.x1, self.y1, self.x2, self.y2

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.corners()
        return max(0.0, x2 - x1) * max(0.0, y2 - y1)

    def is_valid(self, tol: float = 1e-12) -> bool:
        x1, y1, x2, y2 = self.corners()
        return (
            self.w >= 0.0
            and self.h >= 0.0
            and -tol <= x1 <= x2 + tol
            and x2 <= 1.0 + tol
            and -tol <= y1 <= y2 + tol
            and y2 <= 1.0 + tol
        )

    def contains_point(self, x: float, y: float) -> bool:
        x1, y1, x2, y2 = self.corners()
        return x1 <= x <= x2 and y1 <= y <= y2

    def flipped(self) -> "Box":
        return Box(1.0 - self.cx, self.cy, self.w, self.h)

    def to_json(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]

    @classmethod
    def from_json(cls, obj: Union[Sequence[float], Mapping[str, Any]]) -> "Box":
        """Accept ``[cx, cy, w, h]`` or ``{"format": "xyxy"|"cxcywh", "box": [...]}``."""
        if isinstance(obj, Mapping):
            fmt = obj.get("format", "cxcywh")
            values = obj.get("box")
            if values is None or len(values) != 4:
                raise BoxError(f"box object needs a 4-value 'box' field, got {obj!r}")
            if fmt == "xyxy":
                return cls.from_corners(*(float(v) for v in values))
            if fmt == "cxcywh":
                return cls.from_array(values)
            raise BoxError(f"unknown box format {fmt!r}")
        return cls.from_array(list(obj))


FULL_CANVAS = Box(0.5, 0.5, 1.0, 1.0)


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    base = inter / union if union > 0.0 else 0.0
    if hull <= 0.0:
        return base
    return base - (hull - union) / hull


def intersection_area(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    return max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))


def union_box(boxes: Iterable[Box]) -> Box:
    boxes = list(boxes)
    if not boxes:
        raise BoxError("union_box needs at least one box")
    if len(boxes) == 1:
        return boxes[0]
    x1 = min(b.x1 for b in boxes)
    y1 = min(b.y1 for b in boxes)
    x2 = max(b.x2 for b in boxes)
    y2 = max(b.y2 for b in boxes)
    return Box.from_corners(x1, y1, x2, y2)


def clamp_box(b: Box, floor: float = SIZE_FLOOR) -> Box:
    """Force ``b`` inside the unit canvas with both sides at least ``floor``.

    A box that already satisfies the constraints is returned untouched.
    """
    if b.w >= floor and b.h >= floor and b.is_valid(tol=0.0):
        return b
    w = max(b.w, floor)
    h = max(b.h, floor)
    x1 = min(max(b.cx - w / 2.0, 0.0), 1.0 - floor)
    y1 = min(max(b.cy - h / 2.0, 0.0), 1.0 - floor)
    x2 = min(max(b.cx + w / 2.0, x1 + floor), 1.0)
    y2 = min(max(b.cy + h / 2.0, y1 + floor), 1.0)
    return Box.from_corners(x1, y1, x2, y2)


def apply_offset(b_u: Box, ofs: Box, floor: float = SIZE_FLOOR) -> Box:
    return clamp_box(Box(b_u.cx + ofs.cx, b_u.cy + ofs.cy, b_u.w + ofs.w, b_u.h + ofs.h), floor)


# -- array forms (rows of cx, cy, w, h) ---------------------------------------


def to_corners_array(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2.0
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    rows = [b.as_array() for b in boxes]
    return np.stack(rows) if rows else np.zeros((0, 4))


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box.from_array(row) for row in np.asarray(arr).reshape(-1, 4)]


def _pairwise(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    ca, cb = to_corners_array(a), to_corners_array(b)
    area_a = np.clip(ca[:, 2] - ca[:, 0], 0, None) * np.clip(ca[:, 3] - ca[:, 1], 0, None)
    area_b = np.clip(cb[:, 2] - cb[:, 0], 0, None) * np.clip(cb[:, 3] - cb[:, 1], 0, None)
    iw = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0])
    ih = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    hw = np.maximum(ca[:, None, 2], cb[None, :, 2]) - np.minimum(ca[:, None, 0], cb[None, :, 0])
    hh = np.maximum(ca[:, None, 3], cb[None, :, 3]) - np.minimum(ca[:, None, 1], cb[None, :, 1])
    return inter, union, hw * hh, area_b


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union, _, _ = _pairwise(a, b)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union, hull, _ = _pairwise(a, b)
    base = np.zeros_like(inter)
    np.divide(inter, union, out=base, where=union > 0.0)
    penalty = np.zeros_like(inter)
    np.divide(hull - union, hull, out=penalty, where=hull > 0.0)
    return base - penalty


def coverage_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Fraction of each ``b`` box covered by each ``a`` box: |a ∩ b| / |b|."""
    inter, _, _, area_b = _pairwise(a, b)
    out = np.zeros_like(inter)
    np.divide(inter, np.broadcast_to(area_b[None, :], inter.shape), out=out, where=area_b[None, :] > 0.0)
    return out


# -- mosaic layouts ----------------------------------------------------------


@dataclass(frozen=True)
class MosaicLayout:
    grid: int
    target_cell: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        if self.grid not in (1, 2, 3):
            raise BoxError(f"mosaic grid must be 1, 2 or 3, got {self.grid}")
        self._check_cell(self.target_cell)

    def _check_cell(self, cell: tuple[int, int]) -> None:
        row, col = cell
        if not (0 <= row < self.grid and 0 <= col < self.grid):
            raise BoxError(f"cell {tuple(cell)} outside a {self.grid}x{self.grid} mosaic")

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.grid) for c in range(self.grid)]

    def cell_region(self, cell: tuple[int, int]) -> Box:
        self._check_cell(cell)
        row, col = cell
        g = float(self.grid)
        return Box.from_corners(col / g, row / g, (col + 1) / g, (row + 1) / g)

    @property
    def target_region(self) -> Box:
        return self.cell_region(self.target_cell)


def to_global(layout: MosaicLayout, cell: tuple[int, int], b: Box) -> Box:
    layout._check_cell(cell)
    row, col = cell
    g = float(layout.grid)
    return Box((col + b.cx) / g, (row + b.cy) / g, b.w / g, b.h / g)


def from_global(layout: MosaicLayout, cell: tuple[int, int], b: Box) -> Box:
    layout._check_cell(cell)
    row, col = cell
    g = float(layout.grid)
    return Box(b.cx * g - col, b.cy * g - row, b.w * g, b.h * g)

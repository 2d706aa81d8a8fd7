"""Boxes, points, IoU / GIoU, distance-based regression targets and NMS.

Boxes are continuous and half-open: area is (x_max - x_min) * (y_max - y_min),
with no +1 pixel convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import GeometryError


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box {coords}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise GeometryError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def contains(self, x: float, y: float) -> bool:
        """Strict interior test."""
        return self.x_min < x < self.x_max and self.y_min < y < self.y_max


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite point ({self.x}, {self.y})")


class RegressionTarget(NamedTuple):
    left: float
    top: float
    right: float
    bottom: float


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"score {self.score} outside [0, 1]")


def _intersection(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    return max(iw, 0.0) * max(ih, 0.0)


def iou(a: Box, b: Box) -> float:
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def giou(a: Box, b: Box) -> float:
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    enclose = ((max(a.x_max, b.x_max) - min(a.x_min, b.x_min))
               * (max(a.y_max, b.y_max) - min(a.y_min, b.y_min)))
    return inter / union - (enclose - union) / enclose


def giou_loss(pred: Box, truth: Box) -> float:
    return 1.0 - giou(pred, truth)


def giou_loss_tensor(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Per-row ``1 - GIoU`` for (N, 4) box tensors in xyxy order."""
    px1, py1, px2, py2 = pred.unbind(-1)
    tx1, ty1, tx2, ty2 = truth.unbind(-1)
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw = (torch.minimum(px2, tx2) - torch.maximum(px1, tx1)).clamp(min=0)
    ih = (torch.minimum(py2, ty2) - torch.maximum(py1, ty1)).clamp(min=0)
    inter = iw * ih
    union = area_p + area_t - inter
    enclose = ((torch.maximum(px2, tx2) - torch.minimum(px1, tx1))
               * (torch.maximum(py2, ty2) - torch.minimum(py1, ty1)))
    return 1.0 - (inter / union - (enclose - union) / enclose)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_targets(box: Box, location: tuple[float, float]) -> RegressionTarget:
    """Distances from a cell center to the four box edges."""
    x, y = location
    if not box.contains(x, y):
        raise GeometryError(f"location ({x}, {y}) not strictly inside {box.as_tuple()}")
    return RegressionTarget(x - box.x_min, y - box.y_min, box.x_max - x, box.y_max - y)


def decode_targets(target: RegressionTarget, location: tuple[float, float]) -> Box:
    x, y = location
    return Box(x - target.left, y - target.top, x + target.right, y + target.bottom)


def decode_tensor(distances: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """(N, 4) ltrb distances + (N, 2) centers -> (N, 4) xyxy boxes."""
    x, y = centers[:, 0], centers[:, 1]
    left, top, right, bottom = distances.unbind(-1)
    return torch.stack((x - left, y - top, x + right, y + bottom), dim=-1)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices, highest score first.

    Equal scores keep input order (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest):
            overlaps = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            suppressed[rest[overlaps >= iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    if not detections:
        return []
    boxes = np.array([d.box.as_tuple() for d in detections])
    scores = np.array([d.score for d in detections])
    return [detections[i] for i in nms_indices(boxes, scores, iou_threshold)]

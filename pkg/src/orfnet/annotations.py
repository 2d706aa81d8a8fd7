"""Omni-supervised data model: box-labeled, dot-labeled and unlabeled samples.

Also owns the certain/uncertain region masks each supervision form induces on
the pyramid grid, horizontal flip augmentation, and the on-disk dataset format.

Dataset directory layout::

    index.jsonl           one JSON object per sample, keys in this order:
                          id, split, kind, height, width, channels,
                          annotations, hidden_truth
    images/<id>.f32       raw H x W x C little-endian float32, row-major

``kind`` is ``box`` (annotations = [[x_min, y_min, x_max, y_max], ...]),
``dot`` (annotations = [[x, y], ...]) or ``unlabeled`` (annotations = []).
``hidden_truth`` is a list of boxes, or null when the sample carries none.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np

from .errors import DataError
from .geometry import Box, Point
from .pyramid import PyramidSpec


class Region(enum.IntEnum):
    UNCERTAIN = 0
    CERTAIN_POSITIVE = 1
    CERTAIN_NEGATIVE = 2


@dataclass(frozen=True)
class BoxLabeled:
    boxes: tuple[Box, ...]
    kind = "box"

    def __post_init__(self):
        if not self.boxes:
            raise DataError("box-labeled sample needs at least one box")


@dataclass(frozen=True)
class DotLabeled:
    points: tuple[Point, ...]
    kind = "dot"

    def __post_init__(self):
        if not self.points:
            raise DataError("dot-labeled sample needs at least one point")


@dataclass(frozen=True)
class Unlabeled:
    kind = "unlabeled"


Supervision = Union[BoxLabeled, DotLabeled, Unlabeled]
KINDS = ("box", "dot", "unlabeled")


@dataclass(frozen=True, eq=False)
class Sample:
    sample_id: str
    image: np.ndarray
    supervision: Supervision
    hidden_truth: tuple[Box, ...] | None = None

    def __post_init__(self):
        if self.image.ndim != 3:
            raise DataError(f"{self.sample_id}: image must be H x W x C, got {self.image.shape}")

    @property
    def kind(self) -> str:
        return self.supervision.kind

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def for_training(self) -> "Sample":
        """Copy with the hidden ground truth removed."""
        return replace(self, hidden_truth=None)


def samples_equal(a: Sample, b: Sample) -> bool:
    """Bit-exact equality of image, supervision and hidden truth."""
    return (a.sample_id == b.sample_id
            and a.image.dtype == b.image.dtype
            and a.image.shape == b.image.shape
            and a.image.tobytes() == b.image.tobytes()
            and a.supervision == b.supervision
            and a.hidden_truth == b.hidden_truth)


@dataclass
class RegionMask:
    """Per-cell region labels over a whole pyramid, stored flat.

    ``box_members[j]`` flags the cells whose centres are strictly inside box
    j (box form only); ``dot_cells[k]`` lists the certain-positive cell of dot
    k at every level (dot form only).
    """

    pyramid: PyramidSpec
    kind: str
    labels: np.ndarray
    boxes: tuple[Box, ...] = ()
    box_members: list[np.ndarray] = field(default_factory=list)
    dot_cells: list[np.ndarray] = field(default_factory=list)

    def levels(self) -> list[np.ndarray]:
        return self.pyramid.split(self.labels)

    @property
    def uncertain(self) -> np.ndarray:
        return self.labels == Region.UNCERTAIN


def cells_inside(box: Box, pyramid: PyramidSpec) -> np.ndarray:
    c = pyramid.centers
    return ((c[:, 0] > box.x_min) & (c[:, 0] < box.x_max)
            & (c[:, 1] > box.y_min) & (c[:, 1] < box.y_max))


def nearest_cells(point: Point, pyramid: PyramidSpec) -> np.ndarray:
    """Flat index of the nearest cell centre at each level (row-major ties)."""
    d2 = (pyramid.centers[:, 0] - point.x) ** 2 + (pyramid.centers[:, 1] - point.y) ** 2
    out = []
    for i in range(pyramid.num_levels):
        sl = pyramid.level_slice(i)
        out.append(sl.start + int(np.argmin(d2[sl])))
    return np.asarray(out, dtype=np.int64)


def build_region_mask(sample: Sample, pyramid: PyramidSpec) -> RegionMask:
    if (sample.height, sample.width) != pyramid.image_size:
        raise DataError(f"{sample.sample_id}: image {sample.height}x{sample.width} "
                        f"does not match pyramid {pyramid.image_size}")
    n = pyramid.num_cells
    sup = sample.supervision
    if isinstance(sup, BoxLabeled):
        members = [cells_inside(b, pyramid) for b in sup.boxes]
        labels = np.full(n, Region.CERTAIN_NEGATIVE, dtype=np.int8)
        labels[np.logical_or.reduce(members)] = Region.UNCERTAIN
        return RegionMask(pyramid, "box", labels, boxes=sup.boxes, box_members=members)
    if isinstance(sup, DotLabeled):
        labels = np.full(n, Region.UNCERTAIN, dtype=np.int8)
        cells = []
        for p in sup.points:
            if not (0 <= p.x < sample.width and 0 <= p.y < sample.height):
                raise DataError(f"{sample.sample_id}: dot ({p.x}, {p.y}) outside image")
            idx = nearest_cells(p, pyramid)
            labels[idx] = Region.CERTAIN_POSITIVE
            cells.append(idx)
        return RegionMask(pyramid, "dot", labels, dot_cells=cells)
    return RegionMask(pyramid, "unlabeled", np.full(n, Region.UNCERTAIN, dtype=np.int8))


def _flip_box(b: Box, width: float) -> Box:
    return Box(width - b.x_max, b.y_min, width - b.x_min, b.y_max)


def _flip_point(p: Point, width: float) -> Point:
    x = width - p.x
    if x >= width:
        x = math.nextafter(width, 0.0)
    return Point(x, p.y)


def flip_augment(sample: Sample) -> Sample:
    """Mirror the image and every annotation about the vertical centre line.

    Exact (an involution) for coordinates on a dyadic lattice, which is what
    the synthetic generator produces; a dot on x = 0 lands just inside the
    right edge.
    """
    w = float(sample.width)
    sup = sample.supervision
    if isinstance(sup, BoxLabeled):
        sup = BoxLabeled(tuple(_flip_box(b, w) for b in sup.boxes))
    elif isinstance(sup, DotLabeled):
        sup = DotLabeled(tuple(_flip_point(p, w) for p in sup.points))
    truth = sample.hidden_truth
    if truth is not None:
        truth = tuple(_flip_box(b, w) for b in truth)
    image = np.ascontiguousarray(sample.image[:, ::-1, :])
    return replace(sample, image=image, supervision=sup, hidden_truth=truth)


# --- on-disk format -------------------------------------------------------

def _encode_record(sample: Sample, split: str) -> str:
    sup = sample.supervision
    if isinstance(sup, BoxLabeled):
        ann = [list(b.as_tuple()) for b in sup.boxes]
    elif isinstance(sup, DotLabeled):
        ann = [[p.x, p.y] for p in sup.points]
    else:
        ann = []
    truth = None if sample.hidden_truth is None else [list(b.as_tuple()) for b in sample.hidden_truth]
    h, w, c = sample.image.shape
    record = {"id": sample.sample_id, "split": split, "kind": sample.kind,
              "height": h, "width": w, "channels": c,
              "annotations": ann, "hidden_truth": truth}
    return json.dumps(record)


def _decode_supervision(kind: str, ann) -> Supervision:
    if kind == "box":
        return BoxLabeled(tuple(Box(*a) for a in ann))
    if kind == "dot":
        return DotLabeled(tuple(Point(*a) for a in ann))
    if kind == "unlabeled":
        return Unlabeled()
    raise DataError(f"unknown supervision kind {kind!r}")


def write_dataset(root: str | os.PathLike, splits: dict[str, list[Sample]]) -> Path:
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {root}: {exc}") from exc
    lines = []
    for split, samples in splits.items():
        for s in samples:
            data = np.ascontiguousarray(s.image, dtype="<f4")
            (root / "images" / f"{s.sample_id}.f32").write_bytes(data.tobytes())
            lines.append(_encode_record(s, split))
    (root / "index.jsonl").write_text("\n".join(lines) + "\n")
    return root


def read_dataset(root: str | os.PathLike) -> dict[str, list[Sample]]:
    root = Path(root)
    index = root / "index.jsonl"
    if not index.exists():
        raise DataError(f"no dataset index at {index}")
    splits: dict[str, list[Sample]] = {}
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        raw = (root / "images" / f"{rec['id']}.f32").read_bytes()
        shape = (rec["height"], rec["width"], rec["channels"])
        image = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        truth = rec["hidden_truth"]
        sample = Sample(rec["id"], image, _decode_supervision(rec["kind"], rec["annotations"]),
                        None if truth is None else tuple(Box(*b) for b in truth))
        splits.setdefault(rec["split"], []).append(sample)
    return splits

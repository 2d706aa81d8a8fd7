"""Synthetic omni-supervised detection data with known ground truth.

Objects are bright, axis-aligned Gaussian blobs; their truth box is the
bounding box of the half-maximum ellipse. Images also carry elongated
streak distractors (bright but not objects), smooth background clutter and
white noise. Annotation coordinates are snapped outward to a 1/1024 pixel
lattice so that flips are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .annotations import BoxLabeled, DotLabeled, Sample, Unlabeled, flip_augment
from .errors import ConfigError, DataError
from .geometry import Box, Point
from .seeding import substream

HALF_MAX = math.sqrt(2 * math.log(2))
LATTICE = 1024.0
SPLITS = ("box", "dot", "unlabeled", "val", "test")


@dataclass
class GeneratorConfig:
    image_size: int = 64
    channels: int = 1
    objects_min: int = 1
    objects_max: int = 3
    empty_fraction: float = 0.1
    size_min: float = 6.0
    size_max: float = 18.0
    contrast: float = 1.0
    noise: float = 0.3
    clutter: float = 0.15
    distractors_max: int = 2
    seed: int = 0
    n_box: int = 50
    n_dot: int = 150
    n_unlabeled: int = 400
    n_val: int = 50
    n_test: int = 200

    def __post_init__(self):
        if self.size_min <= 0 or self.size_max < self.size_min:
            raise ConfigError(f"bad object size range [{self.size_min}, {self.size_max}]")
        if self.size_max >= self.image_size:
            raise ConfigError(f"objects of size {self.size_max} do not fit a {self.image_size} image")
        if self.objects_min < 0 or self.objects_max < max(self.objects_min, 1):
            raise ConfigError("need 0 <= objects_min <= objects_max and objects_max >= 1")
        if not 0 <= self.empty_fraction <= 1:
            raise ConfigError("empty_fraction must lie in [0, 1]")
        counts = (self.n_box, self.n_dot, self.n_unlabeled, self.n_val, self.n_test)
        if min(counts) < 0:
            raise ConfigError("split sizes must be >= 0")

    def split_size(self, split: str) -> int:
        return getattr(self, f"n_{split}" if split != "unlabeled" else "n_unlabeled")


def _snap_out(lo: float, hi: float) -> tuple[float, float]:
    return math.floor(lo * LATTICE) / LATTICE, math.ceil(hi * LATTICE) / LATTICE


def _place(rng, config: GeneratorConfig, taken: list[Box], w: float, h: float):
    n = config.image_size
    for _ in range(50):
        cx = rng.uniform(w / 2, n - w / 2)
        cy = rng.uniform(h / 2, n - h / 2)
        cand = (cx - w / 2 - 2, cy - h / 2 - 2, cx + w / 2 + 2, cy + h / 2 + 2)
        if all(cand[2] <= b.x_min or cand[0] >= b.x_max or cand[3] <= b.y_min or cand[1] >= b.y_max
               for b in taken):
            return cx, cy
    return None


def _blob(yy, xx, cx, cy, sx, sy):
    return np.exp(-((xx - cx) ** 2 / (2 * sx ** 2) + (yy - cy) ** 2 / (2 * sy ** 2)))


def render_image(rng, config: GeneratorConfig, n_objects: int):
    """Return (H x W x C float32 image, tuple of truth boxes)."""
    n = config.image_size
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    img = np.zeros((n, n), dtype=np.float64)
    boxes: list[Box] = []
    for _ in range(n_objects):
        bw, bh = rng.uniform(config.size_min, config.size_max, size=2)
        if max(bw, bh) / min(bw, bh) > 2.0:
            bh = bw * rng.uniform(0.6, 1.6)
            bh = float(np.clip(bh, config.size_min, config.size_max))
        spot = _place(rng, config, boxes, bw, bh)
        if spot is None:
            continue
        cx, cy = spot
        sx, sy = bw / (2 * HALF_MAX), bh / (2 * HALF_MAX)
        img += config.contrast * rng.uniform(0.7, 1.3) * _blob(yy, xx, cx, cy, sx, sy)
        x0, x1 = _snap_out(cx - bw / 2, cx + bw / 2)
        y0, y1 = _snap_out(cy - bh / 2, cy + bh / 2)
        boxes.append(Box(max(x0, 0.0), max(y0, 0.0), min(x1, float(n)), min(y1, float(n))))
    for _ in range(rng.integers(0, config.distractors_max + 1)):
        long_ = rng.uniform(config.size_max, 2 * config.size_max)
        short = rng.uniform(1.0, 2.0)
        sx, sy = (long_, short) if rng.random() < 0.5 else (short, long_)
        cx, cy = rng.uniform(0, n, size=2)
        img += config.contrast * rng.uniform(0.7, 1.3) * _blob(yy, xx, cx, cy, sx / (2 * HALF_MAX),
                                                                sy / (2 * HALF_MAX))
    if config.clutter > 0:
        smooth = gaussian_filter(rng.standard_normal((n, n)), sigma=4.0, mode="wrap")
        img += config.clutter * smooth / (smooth.std() + 1e-12)
    img += config.noise * rng.standard_normal((n, n))
    image = np.repeat(img[:, :, None], config.channels, axis=2).astype(np.float32)
    return image, tuple(boxes)


def _make_sample(config: GeneratorConfig, split: str, index: int) -> Sample:
    rng = substream(config.seed, "data", SPLITS.index(split), index)
    labeled = split in ("box", "dot")
    if not labeled and rng.random() < config.empty_fraction:
        n_obj = 0
    else:
        n_obj = int(rng.integers(max(config.objects_min, 1 if labeled else 0), config.objects_max + 1))
    image, truth = render_image(rng, config, n_obj)
    if labeled and not truth:
        raise DataError(f"could not place any object in {split} sample {index}")
    if split == "box":
        sup = BoxLabeled(truth)
    elif split == "dot":
        sup = DotLabeled(tuple(Point(*b.center) for b in truth))
    else:
        sup = Unlabeled()
    return Sample(f"{split}-{index:05d}", image, sup, truth)


def generate(config: GeneratorConfig) -> dict[str, list[Sample]]:
    """Build every split; output depends only on ``config`` (including its seed)."""
    return {split: [_make_sample(config, split, i) for i in range(config.split_size(split))]
            for split in SPLITS}


FORMS_BY_REGIME = {
    "box_only": ("box",),
    "box+dot": ("box", "dot"),
    "box+dot+unlabeled": ("box", "dot", "unlabeled"),
}


@dataclass
class BatchScheduler:
    """Equal sampling: one sample of every active form per step.

    Each form walks its own shuffled epochs and draws its own flips, so the
    stream of box samples does not depend on which other forms are active.
    """

    pools: dict[str, list[Sample]]
    forms: tuple[str, ...]
    seed: int
    flip_prob: float = 0.5
    _order: dict = field(default_factory=dict, init=False, repr=False)
    _cursor: dict = field(default_factory=dict, init=False, repr=False)
    _epoch: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        for form in self.forms:
            if not self.pools.get(form):
                raise DataError(f"no {form} samples available; drop '{form}' from the regime "
                                f"(e.g. use box_only) or generate that split")
            self._epoch[form] = 0
            self._cursor[form] = 0
            self._order[form] = None
        self._shuffle = {f: substream(self.seed, "shuffle", i) for i, f in enumerate(("box", "dot", "unlabeled"))}
        self._flip = {f: substream(self.seed, "flip", i) for i, f in enumerate(("box", "dot", "unlabeled"))}

    def _next_index(self, form: str) -> int:
        order = self._order[form]
        if order is None or self._cursor[form] == len(order):
            order = self._shuffle[form].permutation(len(self.pools[form]))
            self._order[form] = order
            self._cursor[form] = 0
            self._epoch[form] += 1
        i = int(order[self._cursor[form]])
        self._cursor[form] += 1
        return i

    def next_batch(self) -> list[Sample]:
        batch = []
        for form in self.forms:
            sample = self.pools[form][self._next_index(form)].for_training()
            if self._flip[form].random() < self.flip_prob:
                sample = flip_augment(sample)
            batch.append(sample)
        return batch


def next_batch(schedule: BatchScheduler) -> list[Sample]:
    return schedule.next_batch()

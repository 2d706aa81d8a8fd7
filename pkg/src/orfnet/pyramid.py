from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class LevelSpec:
    stride: int
    height: int
    width: int


@dataclass(frozen=True)
class PyramidSpec:
    """Grid geometry of every pyramid level.

    Cells of all levels are also addressed through one flat index (level by
    level, row-major inside a level); ``offsets`` gives each level's start.
    Cell (r, c) at stride s is centred on ((c + 0.5) s, (r + 0.5) s).
    """

    levels: tuple[LevelSpec, ...]

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("pyramid needs at least one level")
        strides = [lv.stride for lv in self.levels]
        if any(s < 1 for s in strides) or any(b <= a for a, b in zip(strides, strides[1:])):
            raise ShapeError(f"strides must be positive and strictly increasing, got {strides}")
        for lv in self.levels:
            if lv.height < 1 or lv.width < 1:
                raise ShapeError(f"empty level {lv}")

    @classmethod
    def for_image(cls, height: int, width: int, strides=(4, 8, 16)) -> "PyramidSpec":
        top = max(strides)
        if height % top or width % top:
            raise ShapeError(f"image {height}x{width} not divisible by largest stride {top}")
        return cls(tuple(LevelSpec(s, height // s, width // s) for s in strides))

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def image_size(self) -> tuple[int, int]:
        lv = self.levels[0]
        return (lv.height * lv.stride, lv.width * lv.stride)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        out, total = [], 0
        for lv in self.levels:
            out.append(total)
            total += lv.height * lv.width
        out.append(total)
        return tuple(out)

    @property
    def num_cells(self) -> int:
        return self.offsets[-1]

    def level_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])

    @cached_property
    def centers(self) -> np.ndarray:
        """(num_cells, 2) array of cell centres as (x, y)."""
        parts = []
        for lv in self.levels:
            ys, xs = np.meshgrid(np.arange(lv.height), np.arange(lv.width), indexing="ij")
            parts.append(np.stack(((xs.ravel() + 0.5) * lv.stride,
                                   (ys.ravel() + 0.5) * lv.stride), axis=1))
        out = np.concatenate(parts).astype(np.float64)
        out.flags.writeable = False
        return out

    @cached_property
    def cell_strides(self) -> np.ndarray:
        out = np.concatenate([np.full(lv.height * lv.width, lv.stride, dtype=np.float64)
                              for lv in self.levels])
        out.flags.writeable = False
        return out

    @cached_property
    def level_ids(self) -> np.ndarray:
        out = np.concatenate([np.full(lv.height * lv.width, i, dtype=np.int64)
                              for i, lv in enumerate(self.levels)])
        out.flags.writeable = False
        return out

    def split(self, flat):
        """Per-level 2-D views of a flat per-cell array."""
        return [flat[self.level_slice(i)].reshape(lv.height, lv.width)
                for i, lv in enumerate(self.levels)]

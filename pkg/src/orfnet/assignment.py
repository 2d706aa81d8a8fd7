"""Guidance maps and dynamic label assignment.

A guidance map scores every uncertain cell of one image in [0, 1]. The
inter-guided map (IGM) of a branch is the geometric mean of the *other*
trained branches' probabilities; the self-guided map (SGM) uses the branch's own
probabilities. Either raw map is min-max normalised per region: per box and
per level for box-labeled images, over all uncertain cells of a level for
dot-labeled and unlabeled images. Guidance is always computed on detached
numpy copies, so no gradient flows back into the branches that produced it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch

from .annotations import Region, RegionMask
from .errors import DataError, ShapeError

IGM = "IGM"
SGM = "SGM"


class Label(enum.IntEnum):
    IGNORE = 0
    POS = 1
    NEG = 2


@dataclass
class GuidanceMap:
    """Normalised guidance over a pyramid (flat), zero outside its regions.

    For box-labeled images ``per_box[j]`` holds box j's own normalised map
    (NaN outside the box), since boxes are normalised independently.
    """

    values: np.ndarray
    provenance: str
    per_box: list[np.ndarray] = field(default_factory=list)


@dataclass
class AssignmentResult:
    kind: str
    labels: np.ndarray
    weights: np.ndarray
    uncertain: np.ndarray
    box_positives: list[np.ndarray] = field(default_factory=list)
    box_weights: list[np.ndarray] = field(default_factory=list)
    guided: bool = True

    @property
    def positives(self) -> np.ndarray:
        return self.labels == Label.POS

    @property
    def negatives(self) -> np.ndarray:
        return self.labels == Label.NEG

    @property
    def counts(self) -> dict:
        n_pos = int(self.positives.sum())
        n_neg = int(self.negatives.sum())
        if self.kind == "box":
            return {"S_p": [len(p) for p in self.box_positives], "S_n": n_neg}
        if self.kind == "dot":
            return {"l": n_pos, "R_n": n_neg}
        return {"T_p": n_pos, "T_n": n_neg}


def _as_array(p) -> np.ndarray:
    if isinstance(p, torch.Tensor):
        p = p.detach().cpu().numpy()
    return np.asarray(p, dtype=np.float64).ravel()


def normalize(values) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant region maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalise an empty region")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _regions(mask: RegionMask):
    """Yield (target key, boolean cell selector) for every normalisation region."""
    pyr = mask.pyramid
    if mask.kind == "box":
        for j, members in enumerate(mask.box_members):
            for i in range(pyr.num_levels):
                sel = np.zeros(pyr.num_cells, dtype=bool)
                sl = pyr.level_slice(i)
                sel[sl] = members[sl]
                if sel.any():
                    yield j, sel
    else:
        unc = mask.uncertain
        for i in range(pyr.num_levels):
            sel = np.zeros(pyr.num_cells, dtype=bool)
            sl = pyr.level_slice(i)
            sel[sl] = unc[sl]
            if sel.any():
                yield None, sel


def guidance_from_raw(raw, mask: RegionMask, provenance: str = IGM) -> GuidanceMap:
    """Normalise a raw confidence map over the mask's uncertain regions."""
    raw = _as_array(raw)
    if raw.shape[0] != mask.pyramid.num_cells:
        raise ShapeError(f"raw map has {raw.shape[0]} cells, pyramid has {mask.pyramid.num_cells}")
    values = np.zeros_like(raw)
    per_box = [np.full_like(raw, np.nan) for _ in mask.box_members]
    for j, sel in _regions(mask):
        norm = normalize(raw[sel])
        if j is None:
            values[sel] = norm
        else:
            per_box[j][sel] = norm
            values[sel] = np.maximum(values[sel], norm)
    return GuidanceMap(values, provenance, per_box)


def _check_form(form: str, mask: RegionMask):
    if form != mask.kind:
        raise ValueError(f"supervision form {form!r} does not match mask kind {mask.kind!r}")


def inter_guided_map(form: str, p_box, p_dot, p_unl, mask: RegionMask,
                     active=("box", "dot", "unlabeled")) -> GuidanceMap:
    """Guidance for branch ``form`` from the other branches' predictions.

    ``active`` lists the branches that are being trained. A branch whose form
    is absent from training never learns anything, so it is left out of the
    geometric mean; with a single other active branch the map is that branch.
    """
    _check_form(form, mask)
    maps = {"box": _as_array(p_box), "dot": _as_array(p_dot), "unlabeled": _as_array(p_unl)}
    shapes = {k: v.shape for k, v in maps.items()}
    if len(set(shapes.values())) != 1:
        raise ShapeError(f"prediction maps disagree in shape: {shapes}")
    others = [maps[k] for k in ("box", "dot", "unlabeled") if k != form and k in active]
    if not others:
        raise ValueError(f"no other active branch can guide {form!r}")
    if len(others) == 2:
        raw = np.sqrt(np.clip(others[0] * others[1], 1e-7, None))
    else:
        raw = others[0]
    return guidance_from_raw(raw, mask, IGM)


def self_guided_map(form: str, p_own, mask: RegionMask) -> GuidanceMap:
    _check_form(form, mask)
    return guidance_from_raw(_as_array(p_own), mask, SGM)


def _fallback_cell(mask: RegionMask, j: int, scores: np.ndarray) -> int:
    """Highest-scoring member cell of box j; ties go to the cell nearest the box
    centre, then to the lowest flat index (level, then row-major)."""
    members = np.flatnonzero(mask.box_members[j])
    if len(members) == 0:
        raise DataError(f"box {mask.boxes[j].as_tuple()} contains no cell centre at any level")
    cx, cy = mask.boxes[j].center
    c = mask.pyramid.centers[members]
    dist = (c[:, 0] - cx) ** 2 + (c[:, 1] - cy) ** 2
    order = np.lexsort((members, dist, -scores[members]))
    return int(members[order[0]])


def assign(form: str, guidance: GuidanceMap, mask: RegionMask, t: float = 0.5) -> AssignmentResult:
    """Split the uncertain cells into positives / negatives / ignored by guidance."""
    _check_form(form, mask)
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold t must lie in (0, 1), got {t}")
    n = mask.pyramid.num_cells
    labels = np.full(n, Label.IGNORE, dtype=np.int8)
    unc = mask.uncertain
    w = guidance.values
    result = AssignmentResult(form, labels, w.copy(), unc)
    if form == "box":
        labels[mask.labels == Region.CERTAIN_NEGATIVE] = Label.NEG
        for j in range(len(mask.box_members)):
            wj = guidance.per_box[j]
            pos = np.flatnonzero(mask.box_members[j] & (np.nan_to_num(wj, nan=-1.0) >= t))
            if len(pos) == 0:
                pos = np.array([_fallback_cell(mask, j, np.nan_to_num(wj, nan=-1.0))])
            labels[pos] = Label.POS
            result.box_positives.append(pos)
            result.box_weights.append(wj[pos])
    elif form == "dot":
        labels[unc & (w < t)] = Label.NEG
        labels[mask.labels == Region.CERTAIN_POSITIVE] = Label.POS
    else:
        labels[w >= t] = Label.POS
        labels[w < t] = Label.NEG
    return result


def center_assign(mask: RegionMask, ratio: float = 0.5) -> AssignmentResult:
    """Fixed rule: cells in the central ``ratio`` fraction of each box are positive.

    Used for the plain supervised baseline and for optional burn-in.
    """
    if mask.kind != "box":
        raise ValueError("center assignment applies to box-labeled samples only")
    n = mask.pyramid.num_cells
    labels = np.full(n, Label.IGNORE, dtype=np.int8)
    labels[mask.labels == Region.CERTAIN_NEGATIVE] = Label.NEG
    result = AssignmentResult("box", labels, np.zeros(n), mask.uncertain, guided=False)
    c = mask.pyramid.centers
    for j, box in enumerate(mask.boxes):
        cx, cy = box.center
        hw, hh = box.width * ratio / 2, box.height * ratio / 2
        core = (mask.box_members[j]
                & (np.abs(c[:, 0] - cx) < hw) & (np.abs(c[:, 1] - cy) < hh))
        pos = np.flatnonzero(core)
        if len(pos) == 0:
            pos = np.array([_fallback_cell(mask, j, np.zeros(n))])
        labels[pos] = Label.POS
        result.box_positives.append(pos)
        result.box_weights.append(np.ones(len(pos)))
    return result

"""Test-time detection (branch ensembling, decoding, NMS) and AP metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .geometry import Box, Detection, iou_matrix, nms_indices

AP_THRESHOLDS = tuple(round(0.40 + 0.05 * i, 2) for i in range(8))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
BRANCH_KEYS = {"box": "cls_box", "dot": "cls_dot", "unlabeled": "cls_unlabeled"}


def ensemble_scores(probs: list[torch.Tensor], rule: str = "mean") -> torch.Tensor:
    stacked = torch.stack(probs)
    if rule == "mean":
        return stacked.mean(0)
    if rule == "max":
        return stacked.max(0).values
    if rule == "geometric-mean":
        return stacked.clamp(min=1e-12).log().mean(0).exp()
    raise ValueError(f"unknown ensemble rule {rule!r}")


@torch.no_grad()
def infer(model, image: np.ndarray, score_threshold: float = 0.05, nms_iou: float = 0.6,
          branches: Sequence[str] = ("box", "dot", "unlabeled"), ensemble: str = "mean",
          max_detections: int = 100) -> list[Detection]:
    """Detect objects in one H x W x C image; highest score first."""
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None].float()
    out = model.flat_forward(x)
    score = ensemble_scores([out[BRANCH_KEYS[b]][0] for b in branches], ensemble)
    pyramid = model.pyramid(image.shape[0], image.shape[1])
    keep = np.flatnonzero(score.numpy() >= score_threshold)
    if len(keep) == 0:
        return []
    c = pyramid.centers[keep]
    d = out["loc"][0].double().numpy()[keep]
    boxes = np.stack((c[:, 0] - d[:, 0], c[:, 1] - d[:, 1], c[:, 0] + d[:, 2], c[:, 1] + d[:, 3]), 1)
    scores = np.clip(score.double().numpy()[keep], 0.0, 1.0)
    order = nms_indices(boxes, scores, nms_iou)[:max_detections]
    return [Detection(Box(*map(float, boxes[i])), float(scores[i])) for i in order]


def _prepare(detections: Sequence[Sequence[Detection]], truths: Sequence[Sequence[Box]]):
    """Global score order and per-detection IoU rows, shared by every threshold."""
    flat = [(d.score, img, k) for img, dets in enumerate(detections) for k, d in enumerate(dets)]
    scores = np.array([f[0] for f in flat], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    rows = []
    for dets, gts in zip(detections, truths):
        if dets and gts:
            m = iou_matrix([d.box.as_tuple() for d in dets], [g.as_tuple() for g in gts])
            rows.append(m.tolist())
        else:
            rows.append(None)
    ranked = [(flat[i][1], rows[flat[i][1]][flat[i][2]] if rows[flat[i][1]] is not None else None)
              for i in order]
    return ranked, [len(g) for g in truths]


def _match_prepared(prepared, iou_threshold: float):
    ranked, sizes = prepared
    used = [[False] * n for n in sizes]
    tp = np.zeros(len(ranked), dtype=bool)
    for rank, (img, row) in enumerate(ranked):
        if row is None:
            continue
        taken = used[img]
        best, best_iou = -1, -1.0
        # first maximum wins, as with argmax
        for j, v in enumerate(row):
            if not taken[j] and v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_threshold:
            taken[best] = True
            tp[rank] = True
    return tp, sum(sizes)


def _match(detections: Sequence[Sequence[Detection]], truths: Sequence[Sequence[Box]],
           iou_threshold: float):
    """Greedy score-ordered matching; returns per-detection TP flags (score order)
    and the number of truths."""
    return _match_prepared(_prepare(detections, truths), iou_threshold)


def _ap_from_matches(tp: np.ndarray, n_truth: int) -> float:
    if n_truth == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_truth
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(q.mean())


def average_precision(detections: Sequence[Sequence[Detection]], truths: Sequence[Sequence[Box]],
                      iou_threshold: float) -> float:
    """101-point interpolated AP over all images (single class).

    With no truths at all the AP is defined as 0.
    """
    return _ap_from_matches(*_match(detections, truths, iou_threshold))


@dataclass
class APReport:
    per_threshold: dict[float, float] = field(default_factory=dict)

    @property
    def map(self) -> float:
        return float(np.mean([self.per_threshold[t] for t in AP_THRESHOLDS]))

    @property
    def ap50(self) -> float:
        return self.per_threshold[0.5]

    def as_record(self) -> dict:
        return {"mAP": self.map, "AP50": self.ap50,
                "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()}}

    def table(self) -> str:
        rows = ["IoU    AP"] + [f"{t:.2f}   {v:.4f}" for t, v in self.per_threshold.items()]
        rows += [f"mAP    {self.map:.4f}", f"AP50   {self.ap50:.4f}"]
        return "\n".join(rows)


def ap_sweep(detections, truths) -> APReport:
    prepared = _prepare(detections, truths)
    return APReport({t: _ap_from_matches(*_match_prepared(prepared, t)) for t in AP_THRESHOLDS})

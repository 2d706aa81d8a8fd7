"""Training objectives for the omni-supervised head.

All classification losses are focal-style sums over the cells picked by an
:class:`~orfnet.assignment.AssignmentResult`. Per-cell terms are evaluated in
float64 and summed in a fixed order. The confidence-aware (CA) forms replace
the plain focal terms on uncertain cells when ``ca_enabled`` is set; cells
that are certain (box negatives outside every box, annotated dots) always use
the plain form.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch

from .assignment import AssignmentResult
from .errors import ConfigError, GeometryError
from .geometry import Box, decode_tensor, giou_loss_tensor
from .grid import EPS, clamped_log

TERMS = ("reg_b", "pos_b", "neg_b", "pos_d", "neg_d", "pos_u", "neg_u")


@dataclass
class LossConfig:
    gamma: float = 2.0
    t: float = 0.5
    lam: float = 1.0
    beta: float = 1.0
    ca_enabled: bool = False
    # "verbatim": log(P (1 - W)) on positives; "weight": log(P W)
    ca_positive_form: str = "verbatim"
    epsilon: float = EPS
    normalize_by_positives: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.t < 1.0:
            raise ConfigError(f"t must lie in (0, 1), got {self.t}")
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("lam and beta must be >= 0")
        if self.ca_positive_form not in ("verbatim", "weight"):
            raise ConfigError(f"unknown ca_positive_form {self.ca_positive_form!r}")


def _log(x: torch.Tensor, eps: float) -> torch.Tensor:
    return clamped_log(x, eps, 1.0)


def _zero() -> torch.Tensor:
    return torch.zeros((), dtype=torch.float64)


def focal_pos(p: torch.Tensor, gamma: float, eps: float = EPS) -> torch.Tensor:
    return -((1 - p) ** gamma) * _log(p, eps)


def focal_neg(p: torch.Tensor, gamma: float, eps: float = EPS) -> torch.Tensor:
    return -(p ** gamma) * _log(1 - p, eps)


def ca_pos(p: torch.Tensor, w: torch.Tensor, gamma: float, eps: float = EPS,
           form: str = "verbatim") -> torch.Tensor:
    factor = (1 - w) if form == "verbatim" else w
    return -((1 - p) ** gamma) * _log(p * factor, eps)


def ca_neg(p: torch.Tensor, w: torch.Tensor, gamma: float, eps: float = EPS) -> torch.Tensor:
    return -(p ** gamma) * _log(1 - p * (1 - w), eps)


def _as_w(w, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(w, dtype=torch.float64, device=like.device)


def ca_terms(p: torch.Tensor, w, positive, negative, config: LossConfig):
    """CA positive and negative sums over the given cell selections."""
    p = p.double()
    w = _as_w(w, p)
    pos, neg = torch.as_tensor(positive), torch.as_tensor(negative)
    lp = ca_pos(p[pos], w[pos], config.gamma, config.epsilon, config.ca_positive_form).sum()
    ln = ca_neg(p[neg], w[neg], config.gamma, config.epsilon).sum()
    return lp, ln


def _scale(x: torch.Tensor, n: int, config: LossConfig) -> torch.Tensor:
    return x / max(n, 1) if config.normalize_by_positives else x


def box_cls_loss(p_box: torch.Tensor, assignment: AssignmentResult, config: LossConfig):
    """Positive sum over each box's assigned cells; focal negatives outside boxes."""
    p = p_box.double()
    use_ca = config.ca_enabled and assignment.guided
    lp = _zero()
    for idx, w in zip(assignment.box_positives, assignment.box_weights):
        idx = torch.as_tensor(idx)
        if use_ca:
            term = ca_pos(p[idx], _as_w(w, p), config.gamma, config.epsilon, config.ca_positive_form)
        else:
            term = focal_pos(p[idx], config.gamma, config.epsilon)
        lp = lp + term.sum()
    neg = torch.as_tensor(assignment.negatives)
    ln = focal_neg(p[neg], config.gamma, config.epsilon).sum()
    n_pos = sum(len(i) for i in assignment.box_positives)
    return _scale(lp, n_pos, config), _scale(ln, n_pos, config)


def box_reg_loss(distances: torch.Tensor, centers, boxes: tuple[Box, ...],
                 assignment: AssignmentResult, config: LossConfig | None = None) -> torch.Tensor:
    """Sum of ``1 - GIoU`` between decoded and annotated boxes over each box's positives."""
    centers = torch.tensor(centers, dtype=torch.float64)
    d = distances.double()
    total, n_pos = _zero(), 0
    for box, idx in zip(boxes, assignment.box_positives):
        if len(idx) == 0:
            continue
        c = centers[torch.as_tensor(idx)]
        if not bool(((c[:, 0] > box.x_min) & (c[:, 0] < box.x_max)
                     & (c[:, 1] > box.y_min) & (c[:, 1] < box.y_max)).all()):
            raise GeometryError(f"positive cell outside its box {box.as_tuple()}")
        pred = decode_tensor(d[torch.as_tensor(idx)], c)
        truth = torch.tensor(box.as_tuple(), dtype=torch.float64).expand_as(pred)
        total = total + giou_loss_tensor(pred, truth).sum()
        n_pos += len(idx)
    if config is not None:
        total = _scale(total, n_pos, config)
    return total


def dot_cls_loss(p_dot: torch.Tensor, assignment: AssignmentResult, config: LossConfig):
    """Plain focal positives on annotated dots; negatives from uncertain cells below t."""
    p = p_dot.double()
    pos = torch.as_tensor(assignment.positives)
    neg = torch.as_tensor(assignment.negatives)
    lp = focal_pos(p[pos], config.gamma, config.epsilon).sum()
    if config.ca_enabled:
        w = _as_w(assignment.weights, p)
        ln = ca_neg(p[neg], w[neg], config.gamma, config.epsilon).sum()
    else:
        ln = focal_neg(p[neg], config.gamma, config.epsilon).sum()
    n_pos = int(assignment.positives.sum())
    return _scale(lp, n_pos, config), _scale(ln, n_pos, config)


def unlabeled_cls_loss(p_unl: torch.Tensor, assignment: AssignmentResult, config: LossConfig):
    p = p_unl.double()
    if config.ca_enabled:
        lp, ln = ca_terms(p, assignment.weights, assignment.positives, assignment.negatives, config)
    else:
        pos = torch.as_tensor(assignment.positives)
        neg = torch.as_tensor(assignment.negatives)
        lp = focal_pos(p[pos], config.gamma, config.epsilon).sum()
        ln = focal_neg(p[neg], config.gamma, config.epsilon).sum()
    n_pos = int(assignment.positives.sum())
    return _scale(lp, n_pos, config), _scale(ln, n_pos, config)


@dataclass
class LossReport:
    """Per-term loss tensors for one batch, plus sample counts per term."""

    terms: dict[str, torch.Tensor] = field(default_factory=lambda: {k: _zero() for k in TERMS})
    counts: dict[str, int] = field(default_factory=lambda: {
        "box_pos": 0, "box_neg": 0, "dot_pos": 0, "dot_neg": 0, "unl_pos": 0, "unl_neg": 0})
    total: torch.Tensor | None = None

    def add(self, name: str, value: torch.Tensor):
        self.terms[name] = self.terms[name] + value

    def values(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        if self.total is not None:
            out["total"] = float(self.total.detach())
        return out

    def as_record(self) -> dict:
        return {"losses": self.values(), "counts": dict(self.counts)}


def total_loss(report: LossReport, config: LossConfig) -> torch.Tensor:
    """Box terms plus lam-weighted dot terms plus beta-weighted unlabeled terms."""
    t = report.terms
    total = t["reg_b"] + t["pos_b"] + t["neg_b"]
    # zero-weighted forms stay out of the graph
    if config.lam:
        total = total + config.lam * (t["pos_d"] + t["neg_d"])
    if config.beta:
        total = total + config.beta * (t["pos_u"] + t["neg_u"])
    report.total = total
    return total


def config_dict(config: LossConfig) -> dict:
    return asdict(config)

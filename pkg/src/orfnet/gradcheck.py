"""Central finite-difference checks of every analytic gradient the trainer uses.

Each suite draws random configurations away from clamp boundaries, kinks and
the assignment threshold, and compares autograd against
``(f(x + h) - f(x - h)) / 2h`` in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import assignment as asg
from .annotations import BoxLabeled, DotLabeled, Sample, Unlabeled
from .geometry import Box, Point, giou_loss_tensor
from .grid import FeatureGrid, elementwise
from .losses import (LossConfig, box_cls_loss, ca_neg, ca_pos, dot_cls_loss, focal_neg,
                     focal_pos, unlabeled_cls_loss)
from .model import ModelConfig, build_detector

ELEMENTARY_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    configs: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} max rel err {self.max_rel_error:.2e} "
                f"(tol {self.tolerance:.0e}, {self.configs} configs)")


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                     h: float = 1e-5) -> np.ndarray:
    x = x.detach().clone()
    flat = x.view(-1)
    out = np.zeros(flat.numel())
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(f(x))
            flat[i] = orig - h
            down = float(f(x))
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
    return out.reshape(tuple(x.shape))


def analytic_gradient(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> np.ndarray:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x, allow_unused=True)
    return np.zeros(tuple(x.shape)) if g is None else g.numpy()


def check_function(f, x: torch.Tensor, analytic: Callable | None = None, h: float = 1e-5) -> float:
    a = analytic(x) if analytic is not None else analytic_gradient(f, x)
    return rel_error(a, numeric_gradient(f, x, h))


class _Suite:
    def __init__(self, name: str, tolerance: float):
        self.name, self.tolerance = name, tolerance
        self.worst, self.count = 0.0, 0

    def add(self, err: float):
        self.worst = max(self.worst, err)
        self.count += 1

    def result(self) -> CheckResult:
        return CheckResult(self.name, self.worst, self.count, self.tolerance)


def _away(rng, lo, hi, size, avoid=(), gap=1e-3):
    x = rng.uniform(lo, hi, size)
    for a in avoid:
        x = np.where(np.abs(x - a) < gap, x + 2 * gap, x)
    return torch.tensor(x, dtype=torch.float64)


def elementary_suite(rng: np.random.Generator, n: int) -> list[CheckResult]:
    out = []
    for op in ("add", "mul", "sqrt", "sigmoid", "log", "clamp", "scalar-mul"):
        suite = _Suite(f"grid.{op}", ELEMENTARY_TOL)
        for _ in range(n):
            shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
            weights = torch.tensor(rng.normal(size=shape))
            other = torch.tensor(rng.uniform(-2, 2, shape))
            scalar = float(rng.normal())
            lo, hi = -0.5, 0.5
            if op in ("sqrt", "log"):
                x = _away(rng, 0.05, 3.0, shape)
            elif op == "clamp":
                x = _away(rng, -1.5, 1.5, shape, avoid=(lo, hi), gap=1e-2)
            else:
                x = _away(rng, -3, 3, shape)

            def f(v, op=op, other=other, weights=weights, scalar=scalar):
                a = FeatureGrid(0, 4, v)
                b = FeatureGrid(0, 4, other)
                r = elementwise(op, a, b if op in ("add", "mul") else None,
                                scalar=scalar, lo=lo, hi=hi)
                return (r.values * weights).sum()

            suite.add(check_function(f, x))
        out.append(suite.result())
    return out


def _random_partition(rng, n):
    lab = rng.integers(0, 3, n)
    return lab == 1, lab == 2


def loss_suite(rng: np.random.Generator, n: int) -> list[CheckResult]:
    suites = {k: _Suite(f"loss.{k}", ELEMENTARY_TOL) for k in
              ("focal_pos", "focal_neg", "ca_pos", "ca_pos_weight", "ca_neg",
               "box_cls", "box_cls_ca", "dot_cls", "dot_cls_ca", "unl_cls", "unl_cls_ca")}
    for _ in range(n):
        m = int(rng.integers(2, 12))
        gamma = float(rng.choice([0.0, 0.5, 1.0, 2.0, 3.0]))
        t = float(rng.uniform(0.3, 0.7))
        p = _away(rng, 0.02, 0.98, m)
        w = _away(rng, 0.0, 0.95, m, avoid=(t,), gap=1e-2).clamp(0, 0.95)
        wt = torch.tensor(rng.normal(size=m))
        suites["focal_pos"].add(check_function(lambda v: (focal_pos(v, gamma) * wt).sum(), p))
        suites["focal_neg"].add(check_function(lambda v: (focal_neg(v, gamma) * wt).sum(), p))
        suites["ca_pos"].add(check_function(lambda v: (ca_pos(v, w, gamma) * wt).sum(), p))
        w_pos = w.clamp(min=0.05)
        suites["ca_pos_weight"].add(check_function(
            lambda v: (ca_pos(v, w_pos, gamma, form="weight") * wt).sum(), p))
        suites["ca_neg"].add(check_function(lambda v: (ca_neg(v, w, gamma) * wt).sum(), p))

        pos, neg = _random_partition(rng, m)
        labels = np.where(pos, asg.Label.POS, np.where(neg, asg.Label.NEG, asg.Label.IGNORE)).astype(np.int8)
        wn = w.numpy()
        box_pos = [np.flatnonzero(pos)[: max(1, int(pos.sum()) // 2)], np.flatnonzero(pos)[int(pos.sum()) // 2:]]
        box_a = asg.AssignmentResult("box", labels, wn, ~neg, box_positives=box_pos,
                                     box_weights=[wn[i] for i in box_pos])
        dot_a = asg.AssignmentResult("dot", labels, wn, ~pos)
        unl_a = asg.AssignmentResult("unlabeled", labels, wn, np.ones(m, bool))
        for ca in (False, True):
            cfg = LossConfig(gamma=gamma, t=t, ca_enabled=ca)
            tag = "_ca" if ca else ""
            suites[f"box_cls{tag}"].add(check_function(lambda v: sum(box_cls_loss(v, box_a, cfg)), p))
            suites[f"dot_cls{tag}"].add(check_function(lambda v: sum(dot_cls_loss(v, dot_a, cfg)), p))
            suites[f"unl_cls{tag}"].add(check_function(lambda v: sum(unlabeled_cls_loss(v, unl_a, cfg)), p))
    return [s.result() for s in suites.values()]


def _random_box(rng, lo=0.0, hi=64.0) -> np.ndarray:
    x0, y0 = rng.uniform(lo, hi - 10, 2)
    w, h = rng.uniform(2, 20, 2)
    return np.array([x0, y0, x0 + w, y0 + h])


def giou_suite(rng: np.random.Generator, n: int) -> list[CheckResult]:
    suite = _Suite("geometry.giou_loss", ELEMENTARY_TOL)
    while suite.count < n:
        pred, truth = _random_box(rng), _random_box(rng)
        edges_p, edges_t = pred.reshape(2, 2).T.ravel(), truth.reshape(2, 2).T.ravel()
        # skip near-coincident edges, where GIoU has kinks
        if np.min(np.abs(edges_p[:, None] - edges_t[None, :])) < 1e-2:
            continue
        t = torch.tensor(truth)[None]
        suite.add(check_function(lambda v: giou_loss_tensor(v[None], t).sum(), torch.tensor(pred)))
    return [suite.result()]


def _fixture_batch(rng, size=64) -> list[Sample]:
    img = lambda: rng.normal(size=(size, size, 1)).astype(np.float32)
    boxes = (Box(10.0, 12.0, 30.0, 28.0), Box(40.0, 36.0, 56.0, 60.0))
    return [Sample("box", img(), BoxLabeled(boxes)),
            Sample("dot", img(), DotLabeled((Point(20.0, 20.0), Point(47.0, 50.0)))),
            Sample("unl", img(), Unlabeled())]


def model_suite(rng: np.random.Generator, n_params: int = 20, seed: int = 0,
                ca: bool = True) -> list[CheckResult]:
    """End-to-end: d L_total / d parameter for random parameter entries, assignment frozen."""
    from .training import ExperimentConfig, batch_losses
    from .losses import total_loss

    config = ExperimentConfig(ca=ca)
    model = build_detector(ModelConfig(), seed).double()
    # push heads off the prior so that every branch carries signal
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("heads"):
                p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.1)
    batch = _fixture_batch(rng)
    pyramid = model.pyramid(64, 64)
    _, frozen = batch_losses(model, batch, pyramid, config, 0)

    def loss():
        report, _ = batch_losses(model, batch, pyramid, config, 0, assignments=frozen)
        return total_loss(report, config.loss)

    params = dict(model.named_parameters())
    names = sorted(params)
    grads = torch.autograd.grad(loss(), [params[k] for k in names], allow_unused=True)
    analytic = {k: (torch.zeros_like(params[k]) if g is None else g) for k, g in zip(names, grads)}
    suite = _Suite("model.end_to_end", END_TO_END_TOL)
    h = 1e-6
    for _ in range(n_params):
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + h
            up = float(loss())
            p[idx] = orig - h
            down = float(loss())
            p[idx] = orig
        suite.add(rel_error([float(analytic[name][idx])], [(up - down) / (2 * h)], floor=1e-7))
    return [suite.result()]


def run_gradcheck(seed: int = 0, configs: int = 100, model_params: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    results += elementary_suite(rng, configs)
    results += loss_suite(rng, configs)
    results += giou_suite(rng, configs)
    results += model_suite(rng, model_params, seed)
    return results


def corrupted_check(seed: int = 0) -> CheckResult:
    """Negative control: a deliberately wrong focal-loss gradient must fail."""
    rng = np.random.default_rng(seed)
    p = _away(rng, 0.05, 0.95, 8)
    f = lambda v: focal_pos(v, 2.0).sum()
    wrong = lambda v: analytic_gradient(f, v) * 1.05
    return CheckResult("loss.focal_pos[corrupted]", check_function(f, p, analytic=wrong), 1, ELEMENTARY_TOL)

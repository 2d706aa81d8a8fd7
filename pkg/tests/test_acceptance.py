"""Acceptance criteria, one PASS/FAIL line each (see the terminal summary).

Criteria 5 and 6 share one 5-seed ablation run of about half an hour;
deselect them with ``-m "not slow"``.
"""

import json
import os
import time

import numpy as np
import pytest
import torch

import oracles
from conftest import pools_for
from orfnet.ablation import format_table, pooled_sd, run_ablation
from orfnet.annotations import BoxLabeled, DotLabeled, Region, Sample, Unlabeled, build_region_mask
from orfnet.assignment import IGM, SGM, Label, assign, guidance_from_raw, inter_guided_map, self_guided_map
from orfnet.cli import main
from orfnet.evaluation import RECALL_POINTS, average_precision
from orfnet.geometry import Box, Detection, Point, nms_indices
from orfnet.gradcheck import corrupted_check, run_gradcheck
from orfnet.losses import LossConfig, box_cls_loss, dot_cls_loss, unlabeled_cls_loss
from orfnet.model import load_checkpoint
from orfnet.pyramid import PyramidSpec
from orfnet.synthetic import GeneratorConfig, generate
from orfnet.training import ExperimentConfig, apply_thread_env, run_training

PYR = PyramidSpec.for_image(64, 64)
N = PYR.num_cells
SEEDS = 5
ABLATION_BUDGET = 30 * 60


def test_criterion_1_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    results = run_gradcheck(seed=0, configs=100, model_params=20)
    negative = corrupted_check(0)
    elapsed = time.perf_counter() - t0
    for r in results + [negative]:
        print(r.line())
    worst = max(results, key=lambda r: r.max_rel_error / r.tolerance)
    ok = all(r.passed for r in results) and not negative.passed and elapsed < 60
    criterion(1, ok, f"{len(results)} suites, worst {worst.name} {worst.max_rel_error:.1e} "
                     f"(tol {worst.tolerance:.0e}), corrupted control fails, {elapsed:.1f}s < 60s")
    assert ok


def test_criterion_2_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    nms_bad = 0
    for _ in range(1000):
        n = int(rng.integers(0, 51))
        xy = rng.uniform(0, 50, (n, 2))
        bx = np.concatenate([xy, xy + rng.uniform(1, 20, (n, 2))], 1)
        scores = np.round(rng.uniform(0, 1, n), 2)
        thr = float(rng.uniform(0.1, 0.9))
        nms_bad += nms_indices(bx, scores, thr).tolist() != oracles.nms(bx.tolist(), scores.tolist(), thr)
    worst = 0.0
    for _ in range(500):
        dets, truths = oracles.random_ap_fixture(rng, max_dets=10, max_truths=5)
        thr = float(rng.choice([0.4, 0.5, 0.6, 0.75]))
        got = average_precision([[Detection(Box(*b), s) for b, s in img] for img in dets],
                                [[Box(*b) for b in img] for img in truths], thr)
        worst = max(worst, abs(got - oracles.average_precision(dets, truths, thr, RECALL_POINTS)))
    elapsed = time.perf_counter() - t0
    ok = nms_bad == 0 and worst <= 1e-9 and elapsed < 60
    criterion(2, ok, f"NMS mismatches {nms_bad}/1000, AP max |diff| {worst:.1e} over 500 fixtures "
                     f"(tol 1e-9), {elapsed:.1f}s < 60s")
    assert ok


def _mask(sup):
    return build_region_mask(Sample("s", np.zeros((64, 64, 1), np.float32), sup), PYR)


def _random_boxes(rng):
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        x0, y0 = rng.uniform(0, 54, 2)
        w, h = rng.uniform(5, 20, 2)  # wider than the finest stride
        boxes.append(Box(x0, y0, min(x0 + w, 64.0), min(y0 + h, 64.0)))
    return tuple(boxes)


def _check_instance(rng, cfg):
    """All assignment properties on one random instance; returns a list of failed property names."""
    failed = []
    boxes = _random_boxes(rng)
    masks = {"box": _mask(BoxLabeled(boxes)),
             "dot": _mask(DotLabeled(tuple(Point(*b.center) for b in boxes))),
             "unlabeled": _mask(Unlabeled())}
    logits = {k: torch.tensor(rng.normal(0, 2, N), requires_grad=True) for k in masks}
    probs = {k: torch.sigmoid(v) for k, v in logits.items()}
    t = float(rng.uniform(0.1, 0.85))
    dt = float(rng.uniform(0.01, 0.1))
    scale, shift = float(rng.uniform(0.01, 100)), float(rng.uniform(-5, 5))
    fns = {"box": box_cls_loss, "dot": dot_cls_loss, "unlabeled": unlabeled_cls_loss}
    for form, m in masks.items():
        mode = IGM if rng.random() < 0.5 else SGM
        if mode == IGM:
            g = inter_guided_map(form, probs["box"], probs["dot"], probs["unlabeled"], m)
        else:
            g = self_guided_map(form, probs[form], m)
        a = assign(form, g, m, t)
        if form == "box":
            inside = np.logical_or.reduce(m.box_members)
            if (a.positives & ~inside).any():
                failed.append("box positives confined")
            if any(len(p) < 1 for p in a.box_positives) or len(a.box_positives) != len(boxes):
                failed.append(">=1 positive per box")
        if (assign(form, g, m, t + dt).positives & ~a.positives).any():
            failed.append("monotone in t")
        raw = rng.uniform(0, 1, N)
        if not np.array_equal(assign(form, guidance_from_raw(raw, m), m, t).labels,
                              assign(form, guidance_from_raw(raw * scale + shift, m), m, t).labels):
            failed.append("affine invariance")
        loss = sum(fns[form](probs[form], a, cfg))
        grads = torch.autograd.grad(loss, list(logits.values()), allow_unused=True, retain_graph=True)
        for name, gr in zip(logits, grads):
            if name != form and gr is not None and gr.abs().any():
                failed.append("detachment")
    return failed


def test_criterion_3_assignment_properties(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cfg = LossConfig(ca_enabled=True)
    failures = {}
    for _ in range(1000):
        for name in _check_instance(rng, cfg):
            failures[name] = failures.get(name, 0) + 1
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    criterion(3, ok, f"1000 instances x 3 forms, violations {failures or 'none'}, {elapsed:.1f}s < 60s")
    assert ok


def test_criterion_4_reductions(criterion, tmp_path):
    apply_thread_env(True)
    data = generate(GeneratorConfig())
    iters = 200
    base = ExperimentConfig(regime="box_only", iterations=iters, output_dir=str(tmp_path / "box_only"))
    full = ExperimentConfig(iterations=iters, burn_in=iters, output_dir=str(tmp_path / "zeroed"))
    full.loss.lam = full.loss.beta = 0.0
    arts = [run_training(c, pools=pools_for(data, c.forms), evaluate_split=False) for c in (base, full)]
    logs = [[json.loads(l)["losses"] for l in a.loss_log.read_text().splitlines()] for a in arts]
    keys = ("reg_b", "pos_b", "neg_b", "total")
    same_log = len(logs[0]) == iters and all([x[k] for k in keys] == [y[k] for k in keys]
                                             for x, y in zip(*logs))
    states = [load_checkpoint(a.checkpoints[-1], base.model).model for a in arts]
    same_params = all(torch.equal(p, q) for (n, p), (_, q) in zip(states[0].named_parameters(),
                                                                  states[1].named_parameters())
                      if not n.startswith(("heads.cls_dot", "heads.cls_unlabeled")))

    rng = np.random.default_rng(4)
    bce = torch.nn.functional.binary_cross_entropy
    cfg = LossConfig(gamma=0.0, ca_enabled=False)
    worst = 0.0
    for _ in range(200):
        boxes = _random_boxes(rng)
        p = torch.tensor(rng.uniform(0.001, 0.999, N))
        for form, sup, fn in (("box", BoxLabeled(boxes), box_cls_loss),
                              ("dot", DotLabeled(tuple(Point(*b.center) for b in boxes)), dot_cls_loss),
                              ("unlabeled", Unlabeled(), unlabeled_cls_loss)):
            m = _mask(sup)
            a = assign(form, guidance_from_raw(rng.uniform(0, 1, N), m), m, 0.5)
            target = torch.tensor(a.positives, dtype=torch.float64)
            want = [bce(p[s], target[s], reduction="sum").item() if s.any() else 0.0
                    for s in (a.positives, a.negatives)]
            if form == "box":
                # the positive sum runs per box, so a cell shared by two boxes counts twice
                want[0] = sum(bce(p[g], torch.ones(len(g), dtype=torch.float64), reduction="sum").item()
                              for g in a.box_positives)
            got = [x.item() for x in fn(p, a, cfg)]
            worst = max(worst, max(abs(g - w) / max(abs(w), 1.0) for g, w in zip(got, want)))
    ok = same_log and same_params and worst <= 1e-12
    criterion(4, ok, f"zero-weight+burn-in vs box_only over {iters} steps: log bit-exact={same_log}, "
                     f"params bit-exact={same_params}; gamma=0 vs BCE max rel diff {worst:.1e} (tol 1e-12)")
    assert ok


def test_criterion_7_determinism(criterion, tmp_path):
    cfg = {"iterations": 200, "dataset_dir": str(tmp_path / "data")}
    import yaml
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["--deterministic", "gen-data", "--config", str(tmp_path / "cfg.yaml")]) == 0
    for run in ("a", "b"):
        assert main(["--deterministic", "train", "--config", str(tmp_path / "cfg.yaml"),
                     "--output-dir", str(tmp_path / run)]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("losses.jsonl", "report.json", "ckpt-000200.bin")}
    ok = all(same.values())
    criterion(7, ok, f"two --deterministic runs, 200 steps: byte-identical {same}")
    assert ok


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = os.environ.get("ORFNET_ACCEPTANCE_DIR") or str(tmp_path_factory.mktemp("ablation"))
    apply_thread_env(True)
    base = ExperimentConfig(burn_in=0)  # burn-in stays off in acceptance runs
    assert not base.loss.normalize_by_positives  # raw sums
    cells = ["box_only", "box+dot/IGM", "box+dot+unlabeled/IGM", "box+dot+unlabeled/SGM",
             "box+dot+unlabeled/IGM+CA"]
    t0 = time.perf_counter()
    results = run_ablation(base, SEEDS, cells, out, generate(base.generator), log=print)
    elapsed = time.perf_counter() - t0
    print(format_table(results))
    print(f"ablation written to {out}")
    return {r.cell: r for r in results}, elapsed


def _ordered(lo, hi, values):
    gap = float(np.mean(values[hi]) - np.mean(values[lo]))
    return gap, pooled_sd(values[lo], values[hi])


@pytest.mark.slow
def test_criterion_5_regime_ordering(criterion, ablation):
    res, elapsed = ablation
    ap50 = {c: r.ap50s for c, r in res.items()}
    chain = ["box_only", "box+dot/IGM", "box+dot+unlabeled/IGM"]
    parts, ok = [], elapsed < ABLATION_BUDGET
    for lo, hi in zip(chain, chain[1:]):
        gap, sd = _ordered(lo, hi, ap50)
        ok &= gap > sd
        parts.append(f"{hi} - {lo} = {gap:+.4f} (pooled sd {sd:.4f})")
    means = ", ".join(f"{c} {np.mean(ap50[c]):.4f}" for c in chain)
    criterion(5, ok, f"AP50 over {SEEDS} seeds: {means}; " + "; ".join(parts)
              + f"; ablation {elapsed / 60:.1f} min < 30")
    assert ok


@pytest.mark.slow
def test_criterion_6_assignment_ordering(criterion, ablation):
    res, _ = ablation
    maps = {c: r.maps for c, r in res.items()}
    sgm, igm, ca = "box+dot+unlabeled/SGM", "box+dot+unlabeled/IGM", "box+dot+unlabeled/IGM+CA"
    gap1, sd1 = _ordered(sgm, igm, maps)
    gap2, _ = _ordered(igm, ca, maps)
    ok = gap1 >= 0 and gap2 >= 0 and gap1 > sd1
    criterion(6, ok, f"mAP over {SEEDS} seeds: SGM {np.mean(maps[sgm]):.4f}, IGM {np.mean(maps[igm]):.4f}, "
                     f"IGM+CA {np.mean(maps[ca]):.4f}; IGM - SGM = {gap1:+.4f} (pooled sd {sd1:.4f}), "
                     f"IGM+CA - IGM = {gap2:+.4f}")
    assert ok

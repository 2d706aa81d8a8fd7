"""Ablation grid: label-assignment variants and supervision regimes over several seeds."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotations import Sample, read_dataset
from .errors import ConfigError, DataError
from .training import ExperimentConfig, run_training

BASELINE = "box_only"
SEMI_REGIMES = ("box+dot", "box+dot+unlabeled")
VARIANTS = {"SGM": ("SGM", False), "SGM+CA": ("SGM", True), "IGM": ("IGM", False), "IGM+CA": ("IGM", True)}


def cell_names() -> list[str]:
    return [BASELINE] + [f"{r}/{v}" for r in SEMI_REGIMES for v in VARIANTS]


def parse_cell(name: str) -> tuple[str, str, bool]:
    """Cell name -> (regime, assignment, ca)."""
    if name == BASELINE:
        return BASELINE, "IGM", False
    regime, _, variant = name.partition("/")
    if regime not in SEMI_REGIMES or variant not in VARIANTS:
        raise ConfigError(f"unknown ablation cell {name!r}; choose from {cell_names()}")
    assignment, ca = VARIANTS[variant]
    return regime, assignment, ca


def cell_config(base: ExperimentConfig, cell: str, seed: int, output_dir) -> ExperimentConfig:
    regime, assignment, ca = parse_cell(cell)
    cfg = copy.deepcopy(base)
    cfg.regime, cfg.assignment, cfg.ca, cfg.seed = regime, assignment, ca, seed
    cfg.loss.ca_enabled = ca
    cfg.output_dir = str(output_dir)
    return cfg


@dataclass
class CellResult:
    cell: str
    seeds: list[int] = field(default_factory=list)
    maps: list[float] = field(default_factory=list)
    ap50s: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    @staticmethod
    def _stats(v):
        if not v:
            return math.nan, math.nan
        return float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    @property
    def map_stats(self):
        return self._stats(self.maps)

    @property
    def ap50_stats(self):
        return self._stats(self.ap50s)

    def as_record(self) -> dict:
        (m, ms), (a, as_) = self.map_stats, self.ap50_stats
        return {"cell": self.cell, "seeds": self.seeds, "mAP": self.maps, "AP50": self.ap50s,
                "mAP_mean": m, "mAP_sd": ms, "AP50_mean": a, "AP50_sd": as_,
                "train_seconds": self.seconds}


def pooled_sd(a: list[float], b: list[float]) -> float:
    """Pooled sample standard deviation of two groups."""
    na, nb = len(a), len(b)
    if na + nb <= 2:
        return 0.0
    va = np.var(a, ddof=1) if na > 1 else 0.0
    vb = np.var(b, ddof=1) if nb > 1 else 0.0
    return float(math.sqrt(((na - 1) * va + (nb - 1) * vb) / (na + nb - 2)))


def format_table(results: list[CellResult]) -> str:
    rows = [f"{'cell':<26} {'n':>2}  {'mAP':>15}  {'AP50':>15}"]
    for r in results:
        (m, ms), (a, as_) = r.map_stats, r.ap50_stats
        rows.append(f"{r.cell:<26} {len(r.maps):>2}  {m:.4f} ± {ms:.4f}  {a:.4f} ± {as_:.4f}")
    return "\n".join(rows)


def run_ablation(base: ExperimentConfig, seeds: int, cells: list[str] | None = None,
                 output_dir=None, splits: dict[str, list[Sample]] | None = None,
                 log=None) -> list[CellResult]:
    """Train every cell for ``seeds`` run seeds (base.seed, base.seed + 1, ...) on one fixed dataset."""
    cells = cells or cell_names()
    for c in cells:
        parse_cell(c)
    if seeds < 1:
        raise ConfigError("need at least one seed")
    if splits is None:
        splits = read_dataset(base.dataset_dir)
    eval_samples = splits.get(base.eval_split)
    if not eval_samples:
        raise DataError(f"dataset has no '{base.eval_split}' split")
    out = Path(output_dir or base.output_dir)
    results = []
    for cell in cells:
        res = CellResult(cell)
        for r in range(seeds):
            seed = base.seed + r
            cfg = cell_config(base, cell, seed, out / cell.replace("/", "__") / f"seed-{seed}")
            pools = {f: [s.for_training() for s in splits.get(f, [])] for f in cfg.forms}
            art = run_training(cfg, pools=pools, eval_samples=eval_samples)
            res.seeds.append(seed)
            res.maps.append(art.report.map)
            res.ap50s.append(art.report.ap50)
            res.seconds.append(art.timings["train_seconds"])
            if log:
                log(f"{cell} seed {seed}: mAP {art.report.map:.4f} AP50 {art.report.ap50:.4f} "
                    f"({art.timings['total_seconds']:.0f}s)")
        results.append(res)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps([r.as_record() for r in results], indent=2) + "\n")
    (out / "ablation.txt").write_text(format_table(results) + "\n")
    return results

"""Experiment configuration, the training loop, and run artifacts."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from . import assignment as asg
from .annotations import Sample, build_region_mask, read_dataset
from .errors import ConfigError, DataError, NumericalError
from .evaluation import APReport, ap_sweep, infer
from .grid import backward
from .losses import (LossConfig, LossReport, box_cls_loss, box_reg_loss, dot_cls_loss,
                     total_loss, unlabeled_cls_loss)
from .model import (DetectorState, ModelConfig, OptimizerConfig, build_detector,
                    save_checkpoint, sgd_step)
from .pyramid import PyramidSpec
from .seeding import subseed
from .synthetic import FORMS_BY_REGIME, BatchScheduler, GeneratorConfig

REGIMES = tuple(FORMS_BY_REGIME)


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    # warm-up keeps early noisy guidance from killing a head tower
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(decay_every=1000,
                                                                               warmup_iters=500))
    regime: str = "box+dot+unlabeled"
    assignment: str = asg.IGM
    ca: bool = False
    # box-labeled samples use the fixed centre rule for this many iterations
    burn_in: int = 500
    center_ratio: float = 0.5
    iterations: int = 3000
    seed: int = 0
    checkpoint_every: int = 1000
    flip_prob: float = 0.5
    score_threshold: float = 0.05
    nms_iou: float = 0.6
    ensemble: str = "mean"
    eval_split: str = "test"
    dataset_dir: str = "data"
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.assignment not in (asg.IGM, asg.SGM):
            raise ConfigError(f"assignment must be IGM or SGM, got {self.assignment!r}")
        if self.iterations < 0 or self.burn_in < 0:
            raise ConfigError("iterations and burn_in must be >= 0")
        if self.ensemble not in ("mean", "max", "geometric-mean"):
            raise ConfigError(f"unknown ensemble rule {self.ensemble!r}")
        self.loss.ca_enabled = bool(self.ca)

    @property
    def forms(self) -> tuple[str, ...]:
        return FORMS_BY_REGIME[self.regime]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["stage_channels"] = list(d["model"]["stage_channels"])
        d["model"]["strides"] = list(d["model"]["strides"])
        return d

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        return _build(cls, data or {}, "config")

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(data)
    if os.environ.get("ORFNET_OUTPUT_DIR"):
        cfg.output_dir = os.environ["ORFNET_OUTPUT_DIR"]
    return cfg


def apply_thread_env(deterministic: bool = False) -> None:
    threads = 1 if deterministic else int(os.environ.get("ORFNET_THREADS", "1"))
    torch.set_num_threads(max(threads, 1))
    if deterministic:
        torch.use_deterministic_algorithms(True)


def image_tensor(sample: Sample) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))[None]


def _guidance(config: ExperimentConfig, form: str, probs: dict, mask):
    if config.assignment == asg.SGM:
        return asg.self_guided_map(form, probs[form], mask)
    return asg.inter_guided_map(form, probs["box"], probs["dot"], probs["unlabeled"], mask,
                                active=config.forms)


def sample_assignment(sample: Sample, probs: dict, mask, config: ExperimentConfig,
                      iteration: int) -> asg.AssignmentResult:
    form = sample.kind
    if form == "box" and (config.regime == "box_only" or iteration < config.burn_in):
        return asg.center_assign(mask, config.center_ratio)
    return asg.assign(form, _guidance(config, form, probs, mask), mask, config.loss.t)


def add_sample_losses(report: LossReport, sample: Sample, out: dict, probs: dict, mask,
                      a: asg.AssignmentResult, pyramid: PyramidSpec, lc: LossConfig) -> None:
    form = sample.kind
    if form == "box":
        lp, ln = box_cls_loss(probs["box"], a, lc)
        report.add("reg_b", box_reg_loss(out["loc"][0], pyramid.centers, mask.boxes, a, lc))
        report.add("pos_b", lp)
        report.add("neg_b", ln)
        report.counts["box_pos"] += sum(len(p) for p in a.box_positives)
        report.counts["box_neg"] += int(a.negatives.sum())
    elif form == "dot":
        lp, ln = dot_cls_loss(probs["dot"], a, lc)
        report.add("pos_d", lp)
        report.add("neg_d", ln)
        report.counts["dot_pos"] += int(a.positives.sum())
        report.counts["dot_neg"] += int(a.negatives.sum())
    else:
        lp, ln = unlabeled_cls_loss(probs["unlabeled"], a, lc)
        report.add("pos_u", lp)
        report.add("neg_u", ln)
        report.counts["unl_pos"] += int(a.positives.sum())
        report.counts["unl_neg"] += int(a.negatives.sum())


def batch_losses(model, batch: list[Sample], pyramid: PyramidSpec, config: ExperimentConfig,
                 iteration: int, assignments: list | None = None):
    """Forward every sample, assign labels, and accumulate the loss terms.

    Passing ``assignments`` reuses a previous step's partition (gradient checks).
    Returns the report and the assignments used.
    """
    report = LossReport()
    used = []
    for k, sample in enumerate(batch):
        out = model.flat_forward(image_tensor(sample).to(next(model.parameters()).dtype))
        probs = {"box": out["cls_box"][0], "dot": out["cls_dot"][0], "unlabeled": out["cls_unlabeled"][0]}
        mask = build_region_mask(sample, pyramid)
        if assignments is None:
            a = sample_assignment(sample, probs, mask, config, iteration)
        else:
            a = assignments[k]
        used.append(a)
        add_sample_losses(report, sample, out, probs, mask, a, pyramid, config.loss)
    return report, used


def train_step(state: DetectorState, batch: list[Sample], pyramid: PyramidSpec,
               config: ExperimentConfig) -> tuple[LossReport, float]:
    it = state.iteration
    report, _ = batch_losses(state.model, batch, pyramid, config, it)
    total = total_loss(report, config.loss)
    if not math.isfinite(float(total.detach())):
        raise NumericalError(f"non-finite loss at iteration {it}: {report.values()}")
    params = dict(state.model.named_parameters())
    grads = backward(total, params)
    lr = sgd_step(state, grads, config.optimizer)
    return report, lr


@dataclass
class RunArtifact:
    output_dir: Path
    config: ExperimentConfig
    report: APReport | None
    loss_log: Path
    checkpoints: list[Path]
    timings: dict


def load_pools(dataset_dir, forms) -> dict[str, list[Sample]]:
    splits = read_dataset(dataset_dir)
    # hidden truth never reaches the training loop
    return {form: [s.for_training() for s in splits.get(form, [])] for form in forms}


def evaluate(model, samples: list[Sample], config: ExperimentConfig) -> tuple[APReport, list]:
    model.eval()
    dets, truths = [], []
    for s in samples:
        if s.hidden_truth is None:
            raise DataError(f"{s.sample_id}: evaluation split carries no hidden truth")
        dets.append(infer(model, s.image, config.score_threshold, config.nms_iou,
                          branches=config.forms, ensemble=config.ensemble))
        truths.append(list(s.hidden_truth))
    return ap_sweep(dets, truths), dets


def run_training(config: ExperimentConfig, evaluate_split: bool = True,
                 pools: dict[str, list[Sample]] | None = None,
                 eval_samples: list[Sample] | None = None) -> RunArtifact:
    t0 = time.perf_counter()
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    config.dump(out / "config.yaml")
    if pools is None:
        pools = load_pools(config.dataset_dir, config.forms)
    schedule = BatchScheduler(pools, config.forms, config.seed, config.flip_prob)

    state = DetectorState(build_detector(config.model, subseed(config.seed, "init")))
    size = config.generator.image_size
    pyramid = state.model.pyramid(size, size)
    checkpoints = [save_checkpoint(state, out / "ckpt-000000.bin")]
    log_path = out / "losses.jsonl"
    t_train = time.perf_counter()
    with open(log_path, "w") as log:
        while state.iteration < config.iterations:
            batch = schedule.next_batch()
            try:
                report, lr = train_step(state, batch, pyramid, config)
            except NumericalError:
                save_checkpoint(state, out / "last-good.bin")
                raise
            record = {"step": state.iteration, "lr": lr, **report.as_record()}
            log.write(json.dumps(record) + "\n")
            if state.iteration % config.checkpoint_every == 0 or state.iteration == config.iterations:
                checkpoints.append(save_checkpoint(state, out / f"ckpt-{state.iteration:06d}.bin"))
    timings = {"train_seconds": time.perf_counter() - t_train}

    report = None
    if evaluate_split:
        if eval_samples is None:
            eval_samples = read_dataset(config.dataset_dir).get(config.eval_split)
            if not eval_samples:
                raise DataError(f"dataset has no '{config.eval_split}' split")
        t_eval = time.perf_counter()
        report, _ = evaluate(state.model, eval_samples, config)
        timings["eval_seconds"] = time.perf_counter() - t_eval
        (out / "report.json").write_text(json.dumps(report.as_record(), indent=2) + "\n")
    timings["total_seconds"] = time.perf_counter() - t0
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    return RunArtifact(out, config, report, log_path, checkpoints, timings)

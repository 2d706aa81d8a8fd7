"""Desk-scale omni-supervised detector and its SGD-momentum optimizer.

The network is a miniature FPN: a stride-2 stem followed by three stride-2
conv stages (strides 4, 8, 16), lateral 1x1 merges with a top-down pathway,
and a head with three classification branches (box, dot, unlabeled) plus one
localization branch, each a small conv tower shared across levels.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, NumericalError, ShapeError
from .pyramid import PyramidSpec

BRANCHES = ("cls_box", "cls_dot", "cls_unlabeled", "loc")
STAGE_STRIDES = (4, 8, 16)
MAX_LOG_OFFSET = 8.0


@dataclass
class ModelConfig:
    in_channels: int = 1
    stem_channels: int = 8
    stage_channels: tuple[int, int, int] = (16, 32, 32)
    fpn_channels: int = 16
    head_convs: int = 1
    strides: tuple[int, ...] = (4, 8, 16)
    prior: float = 0.01
    norm_groups: int = 4

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.strides = tuple(self.strides)
        if not set(self.strides) <= set(STAGE_STRIDES) or len(self.strides) < 2:
            raise ConfigError(f"strides must be 2 or 3 of {STAGE_STRIDES}, got {self.strides}")
        if max(self.stage_channels + (self.stem_channels, self.fpn_channels)) > 32:
            raise ConfigError("channel widths are capped at 32")
        widths = self.stage_channels + (self.stem_channels, self.fpn_channels)
        if self.norm_groups < 0 or (self.norm_groups and any(c % self.norm_groups for c in widths)):
            raise ConfigError(f"norm_groups={self.norm_groups} must divide every channel width")
        if not 0 < self.prior < 1:
            raise ConfigError(f"prior must lie in (0, 1), got {self.prior}")


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_every: int = 30000
    # linear ramp from warmup_factor * lr over the first warmup_iters steps
    warmup_iters: int = 0
    warmup_factor: float = 1.0 / 3.0
    # rescale the whole gradient to this global L2 norm when larger; 0 disables
    clip_norm: float = 0.0

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if self.warmup_iters < 0 or not 0 < self.warmup_factor <= 1:
            raise ConfigError("need warmup_iters >= 0 and warmup_factor in (0, 1]")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0")

    def lr_at(self, iteration: int) -> float:
        lr = self.learning_rate * self.decay_factor ** (iteration // self.decay_every)
        if iteration < self.warmup_iters:
            lr *= self.warmup_factor + (1 - self.warmup_factor) * iteration / self.warmup_iters
        return lr


def _block(cin: int, cout: int, stride: int, groups: int) -> nn.Sequential:
    """3x3 conv, optional GroupNorm, ReLU. GroupNorm is per-sample, so batch size never matters."""
    layers = [nn.Conv2d(cin, cout, 3, stride, 1)]
    if groups:
        layers.append(nn.GroupNorm(groups, cout))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class Detector(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c0, (c1, c2, c3), f = config.stem_channels, config.stage_channels, config.fpn_channels
        self.stem = _block(config.in_channels, c0, 2, config.norm_groups)
        self.stages = nn.ModuleList([_block(c0, c1, 2, config.norm_groups),
                                     _block(c1, c2, 2, config.norm_groups),
                                     _block(c2, c3, 2, config.norm_groups)])
        self.used = [STAGE_STRIDES.index(s) for s in config.strides]
        widths = (c1, c2, c3)
        self.lateral = nn.ModuleList([nn.Conv2d(widths[i], f, 1) for i in self.used])
        self.heads = nn.ModuleDict()
        for name in BRANCHES:
            layers = []
            for _ in range(config.head_convs):
                layers += list(_block(f, f, 1, config.norm_groups))
            layers.append(nn.Conv2d(f, 4 if name == "loc" else 1, 3, 1, 1))
            self.heads[name] = nn.Sequential(*layers)

    def reset_parameters(self, generator: torch.Generator):
        for name, module in self.named_modules():
            if not isinstance(module, nn.Conv2d):
                continue
            if name.startswith("heads"):
                nn.init.normal_(module.weight, 0.0, 0.01, generator=generator)
            else:
                nn.init.kaiming_normal_(module.weight, nonlinearity="relu", generator=generator)
            nn.init.zeros_(module.bias)
        for module in self.modules():
            if isinstance(module, nn.GroupNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        bias = -math.log((1 - self.config.prior) / self.config.prior)
        for name in BRANCHES[:3]:
            nn.init.constant_(self.heads[name][-1].bias, bias)

    def pyramid(self, height: int, width: int) -> PyramidSpec:
        return PyramidSpec.for_image(height, width, self.config.strides)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        stages = []
        for block in self.stages:
            x = block(x)
            stages.append(x)
        feats = [lat(stages[i]) for lat, i in zip(self.lateral, self.used)]
        for k in range(len(feats) - 2, -1, -1):
            feats[k] = feats[k] + F.interpolate(feats[k + 1], size=feats[k].shape[-2:], mode="nearest")
        return feats

    def forward(self, x: torch.Tensor) -> list[dict[str, torch.Tensor]]:
        """Per level: post-sigmoid P_box, P_dot, P_unl (B, H, W) and ltrb distances (B, 4, H, W)."""
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        top = max(self.config.strides)
        if x.shape[-2] % top or x.shape[-1] % top:
            raise ShapeError(f"image {tuple(x.shape[-2:])} not divisible by stride {top}")
        out = []
        for feat, stride in zip(self.features(x), self.config.strides):
            # float64 sigmoid: float32 saturates to exactly 1 near logit 17
            level = {name: torch.sigmoid(self.heads[name](feat)[:, 0].double()) for name in BRANCHES[:3]}
            raw = self.heads["loc"](feat).clamp(max=MAX_LOG_OFFSET)
            level["loc"] = torch.exp(raw) * stride
            out.append(level)
        return out

    def flat_forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Forward with every level flattened into one cell axis (B, N[, 4])."""
        levels = self.forward(x)
        out = {name: torch.cat([lv[name].flatten(1) for lv in levels], dim=1) for name in BRANCHES[:3]}
        out["loc"] = torch.cat([lv["loc"].flatten(2) for lv in levels], dim=2).transpose(1, 2)
        return out


def build_detector(config: ModelConfig, seed: int) -> Detector:
    model = Detector(config)
    gen = torch.Generator().manual_seed(seed)
    model.reset_parameters(gen)
    return model


@dataclass
class DetectorState:
    """Model parameters, one momentum buffer per parameter, and the step counter."""

    model: Detector
    momentum: dict[str, torch.Tensor] = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self):
        for name, p in self.model.named_parameters():
            self.momentum.setdefault(name, torch.zeros_like(p))
        params = dict(self.model.named_parameters())
        if set(params) != set(self.momentum):
            raise ShapeError("momentum buffers do not match parameters")
        for name, buf in self.momentum.items():
            if buf.shape != params[name].shape:
                raise ShapeError(f"buffer {name} has shape {tuple(buf.shape)}, "
                                 f"parameter {tuple(params[name].shape)}")

    def snapshot(self) -> "DetectorState":
        return copy.deepcopy(self)


def sgd_step(state: DetectorState, grads: dict[str, torch.Tensor], config: OptimizerConfig,
             iteration: int | None = None) -> float:
    """One momentum-SGD update in place: v <- m v + g, p <- p - lr v.

    Returns the learning rate used.
    """
    it = state.iteration if iteration is None else iteration
    lr = config.lr_at(it)
    names = [n for n, _ in state.model.named_parameters()]
    params = [p for _, p in state.model.named_parameters()]
    g = [grads[n] if grads.get(n) is not None else torch.zeros_like(p) for n, p in zip(names, params)]
    # one fused reduction instead of a check per tensor
    norms = torch.stack(torch._foreach_norm(g))
    if not bool(torch.isfinite(norms).all()):
        bad = next(n for n, t in zip(names, g) if not bool(torch.isfinite(t).all()))
        raise NumericalError(f"non-finite gradient for parameter {bad}")
    if config.clip_norm > 0:
        total = float(torch.linalg.vector_norm(norms.double()))
        if total > config.clip_norm:
            g = torch._foreach_mul(g, config.clip_norm / total)
    bufs = [state.momentum[n] for n in names]
    with torch.no_grad():
        torch._foreach_mul_(bufs, config.momentum)
        torch._foreach_add_(bufs, g)
        torch._foreach_add_(params, bufs, alpha=-lr)
    state.iteration = it + 1
    return lr


# --- checkpoints ----------------------------------------------------------
# layout: b"ORFCKPT\0", u32 version, u64 iteration, u32 entry count, then per
# entry: u8 kind (0 parameter, 1 momentum), u16 name length, utf-8 name,
# u8 ndim, ndim x u32 dims, little-endian float32 data.

_MAGIC = b"ORFCKPT\0"
_VERSION = 1


def save_checkpoint(state: DetectorState, path) -> Path:
    path = Path(path)
    entries = [(0, n, p.detach()) for n, p in state.model.named_parameters()]
    entries += [(1, n, b) for n, b in state.momentum.items()]
    chunks = [_MAGIC, struct.pack("<IQI", _VERSION, state.iteration, len(entries))]
    for kind, name, t in entries:
        raw = name.encode()
        chunks.append(struct.pack("<BH", kind, len(raw)) + raw)
        chunks.append(struct.pack("<B", t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.cpu().numpy(), dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_checkpoint(path, config: ModelConfig) -> DetectorState:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    version, iteration, count = struct.unpack_from("<IQI", data, pos)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQI")
    params, momentum = {}, {}
    for _ in range(count):
        kind, n = struct.unpack_from("<BH", data, pos)
        pos += 3
        name = data[pos:pos + n].decode()
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 4
        arr = np.frombuffer(data[pos:pos + size], dtype="<f4").reshape(shape).astype(np.float32)
        pos += size
        (params if kind == 0 else momentum)[name] = torch.from_numpy(arr)
    model = Detector(config)
    try:
        model.load_state_dict(params, strict=True)
    except RuntimeError as exc:
        raise DataError(f"{path}: checkpoint does not match model config: {exc}") from exc
    return DetectorState(model, momentum, iteration)

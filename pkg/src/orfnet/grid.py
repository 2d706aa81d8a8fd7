"""Dense per-level feature grids with reverse-mode gradients.

Gradients are recorded by torch autograd; this module pins down the small
set of elementwise operations the assignment and loss code relies on, and the
numerical guards (epsilon clamping) they share.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError

EPS = 1e-7

OP_KINDS = ("add", "mul", "sqrt", "sigmoid", "log", "clamp", "scalar-mul")
_BINARY = {"add", "mul"}


@dataclass
class FeatureGrid:
    """A height x width map of scalars at one pyramid level."""

    level_index: int
    stride: int
    values: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ShapeError(f"grid values must be 2-D, got shape {tuple(self.values.shape)}")
        h, w = self.values.shape
        if h < 1 or w < 1 or self.stride < 1:
            raise ShapeError(f"invalid grid: {h}x{w} at stride {self.stride}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def like(self, values: torch.Tensor) -> "FeatureGrid":
        return FeatureGrid(self.level_index, self.stride, values)

    def detach(self) -> "FeatureGrid":
        return self.like(self.values.detach())


class _ClampedLog(torch.autograd.Function):
    """log(clamp(x, eps, hi)) whose backward is 1 / x even where the clamp is active.

    Through a sigmoid this gives the usual log-sigmoid gradient -(1 - P),
    which does not vanish. A plain clamp (or dividing by the clamped value)
    leaves a branch stuck once its probabilities fall below eps.
    """

    @staticmethod
    def forward(ctx, x, lo, hi):
        ctx.save_for_backward(x)
        return torch.log(torch.clamp(x, min=lo, max=hi))

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad / x.clamp(min=torch.finfo(x.dtype).tiny), None, None


def clamped_log(x: torch.Tensor, eps: float = EPS, hi: float | None = None) -> torch.Tensor:
    return _ClampedLog.apply(x, eps, hi)


def safe_log(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return clamped_log(x, eps)


def safe_sqrt(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return torch.sqrt(torch.clamp(x, min=eps))


def elementwise(op_kind: str, a: FeatureGrid, b: FeatureGrid | None = None, *,
                scalar: float | None = None, lo: float | None = None,
                hi: float | None = None) -> FeatureGrid:
    """Apply one elementwise operation, recording it for backward.

    ``sqrt`` and ``log`` clamp their argument below by ``EPS``. ``clamp``
    takes ``lo``/``hi``; ``scalar-mul`` takes ``scalar``.
    """
    if op_kind not in OP_KINDS:
        raise ValueError(f"unknown op_kind {op_kind!r}; expected one of {OP_KINDS}")
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        if a.shape != b.shape:
            raise ShapeError(f"{op_kind}: shape mismatch {a.shape} vs {b.shape}")
    x = a.values
    if op_kind == "add":
        out = x + b.values
    elif op_kind == "mul":
        out = x * b.values
    elif op_kind == "sqrt":
        out = safe_sqrt(x)
    elif op_kind == "sigmoid":
        out = torch.sigmoid(x)
    elif op_kind == "log":
        out = safe_log(x)
    elif op_kind == "clamp":
        out = torch.clamp(x, min=lo, max=hi)
    else:
        if scalar is None:
            raise ValueError("scalar-mul needs scalar=")
        out = x * scalar
    return a.like(out)


def backward(loss: torch.Tensor, inputs: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Backpropagate a scalar loss and return a gradient for every input.

    Inputs the loss does not depend on get a zero gradient. A loss can be
    backpropagated once; building a new loss re-records the operations.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if getattr(loss, "_orf_consumed", False):
        raise RuntimeError("backward already called on this loss; recompute it first")
    if not loss.requires_grad:
        grads = [None] * len(inputs)
    else:
        grads = torch.autograd.grad(loss, list(inputs.values()), allow_unused=True)
    loss._orf_consumed = True
    return {
        name: (torch.zeros_like(x) if g is None else g)
        for (name, x), g in zip(inputs.items(), grads)
    }

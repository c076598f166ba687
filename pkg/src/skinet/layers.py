"""Torch building blocks shared by the segmenter and the classifiers.

Two pieces of per-call state are carried in context variables rather than on
the modules, so concurrent callers never see each other's settings:

* the per-sample dropout generators used for seeded Monte Carlo forwards;
* the guided-backprop switch that changes the ReLU backward rule.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

_dropout_generators: contextvars.ContextVar = contextvars.ContextVar("dropout_generators", default=None)
_guided: contextvars.ContextVar = contextvars.ContextVar("guided_relu", default=False)


def make_generators(seeds: Sequence[int]) -> list[torch.Generator]:
    gens = []
    for s in seeds:
        g = torch.Generator()
        g.manual_seed(int(s))
        gens.append(g)
    return gens


@contextlib.contextmanager
def mc_dropout(seeds: Sequence[int]):
    """Activate dropout for the enclosed forwards, one generator per batch row."""
    token = _dropout_generators.set(make_generators(seeds))
    try:
        yield
    finally:
        _dropout_generators.reset(token)


@contextlib.contextmanager
def guided_relu():
    token = _guided.set(True)
    try:
        yield
    finally:
        _guided.reset(token)


class MCDropout(nn.Module):
    """Dropout that is also usable for seeded inference-time sampling.

    In training mode it behaves like ``nn.Dropout``. In eval mode it is the
    identity unless an ``mc_dropout`` context is active, in which case batch
    row ``i`` draws its mask from generator ``i``.
    """

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x):
        gens = _dropout_generators.get()
        if gens is not None and not self.training:
            if len(gens) != x.shape[0]:
                raise ValueError(f"{len(gens)} dropout generators for a batch of {x.shape[0]}")
            if self.p == 0.0:
                return x
            keep = 1.0 - self.p
            masks = torch.stack(
                [torch.rand(x.shape[1:], generator=g, dtype=x.dtype) < keep for g in gens]
            )
            return x * masks.to(x.dtype) / keep
        return F.dropout(x, self.p, self.training)

    def extra_repr(self):
        return f"p={self.p}"


class _GuidedReLUFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.clamp(min=0)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        # zero where the forward input was negative or the incoming gradient is
        return grad_out.clamp(min=0) * (x > 0).to(grad_out.dtype)


class ReLU(nn.ReLU):
    """ReLU whose backward pass follows the guided rule inside ``guided_relu()``."""

    def __init__(self):
        super().__init__(inplace=False)

    def forward(self, x):
        if _guided.get():
            return _GuidedReLUFunction.apply(x)
        return F.relu(x)


def conv_bn(in_ch: int, out_ch: int, kernel: int, activation: bool = True) -> nn.Sequential:
    """Same-padded stride-1 convolution, then ReLU (optional), then batch norm."""
    layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2)]
    if activation:
        layers.append(ReLU())
    layers.append(nn.BatchNorm2d(out_ch))
    return nn.Sequential(*layers)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def has_dropout(model: nn.Module) -> bool:
    return any(isinstance(m, MCDropout) for m in model.modules())


def has_guided_relu(model: nn.Module) -> bool:
    return any(isinstance(m, ReLU) for m in model.modules())

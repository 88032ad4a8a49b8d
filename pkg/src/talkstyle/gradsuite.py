"""Finite-difference checks over every layer type and both MoLoRA factor kinds.

Each case builds a small float64 instance from a seed and reduces its output
with a fixed random projection, so no gradient entry cancels by symmetry.
Inputs are checked alongside parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import torch
from torch import Tensor, nn

from . import molora
from .numkit import (
    CHECK_DTYPE,
    ConformerBlock,
    Conv1d,
    ConvModule,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    grad_check,
)

T, D = 5, 8

Builder = Callable[[], tuple[nn.Module, tuple[Tensor, ...]]]


def _x(*shape: int) -> Tensor:
    return torch.randn(*shape, dtype=CHECK_DTYPE)


def _adapted(layer: nn.Module, ranks: list[int]) -> nn.Module:
    holder = nn.Module()
    holder.layer = layer
    molora.attach(holder, molora.MoLoRAConfig(ranks=ranks, target=lambda n: n == "layer"))
    with torch.no_grad():
        for name, p in molora.factor_tensors(holder).items():
            if name.endswith(".B"):
                p.normal_(0.0, 0.3)  # nonzero so A receives a real gradient
    return layer


def _cond_norm() -> tuple[nn.Module, tuple[Tensor, ...]]:
    norm = LayerNorm(D, cond_dim=3)
    with torch.no_grad():
        norm.cond_gain.weight.normal_(0.0, 0.3)
        norm.cond_shift.weight.normal_(0.0, 0.3)
    return norm, (_x(T, D), _x(3))


CASES: dict[str, Builder] = {
    "linear": lambda: (Linear(D, 6), (_x(T, D),)),
    "conv1d.same": lambda: (Conv1d(4, 6, 3), (_x(T, 4),)),
    "conv1d.causal": lambda: (Conv1d(4, 6, 3, padding="causal"), (_x(T, 4),)),
    "conv1d.circular": lambda: (Conv1d(4, 6, 3, padding="circular"), (_x(T, 4),)),
    "conv1d.replicate": lambda: (Conv1d(4, 6, 3, padding="replicate"), (_x(T, 4),)),
    "conv1d.strided": lambda: (Conv1d(4, 6, 3, stride=2, padding="replicate"), (_x(6, 4),)),
    "conv1d.depthwise": lambda: (Conv1d(D, D, 3, groups=D), (_x(T, D),)),
    "layer_norm": lambda: (LayerNorm(D), (_x(T, D),)),
    "layer_norm.conditional": _cond_norm,
    "attention": lambda: (MultiHeadAttention(D, 2), (_x(T, D),)),
    "attention.causal": lambda: (MultiHeadAttention(D, 2, causal=True), (_x(T, D),)),
    "conv_module": lambda: (ConvModule(D, 3), (_x(T, D),)),
    "feed_forward": lambda: (FeedForward(D), (_x(T, D),)),
    "conformer": lambda: (ConformerBlock(D, 2, 3), (_x(T, D),)),
    "conformer.causal": lambda: (ConformerBlock(D, 2, 3, causal=True, use_conv=False), (_x(T, D),)),
    "molora.linear": lambda: (_adapted(Linear(D, D), [2, 4]), (_x(T, D),)),
    "molora.conv1d": lambda: (_adapted(Conv1d(D, D, 3), [2, 4]), (_x(T, D),)),
}


@dataclass
class CaseResult:
    case: str
    seed: int
    max_error: float
    worst: str
    n_tensors: int

    def passed(self, tol: float) -> bool:
        return self.max_error < tol


def check_case(name: str, seed: int, tol: float = 1e-6, h: float = 1e-5) -> CaseResult:
    torch.manual_seed(seed)
    module, inputs = CASES[name]()
    module = module.to(CHECK_DTYPE)
    out_shape = module(*inputs).shape
    proj = torch.randn(out_shape, dtype=CHECK_DTYPE)
    params = {n: p for n, p in module.named_parameters() if p.requires_grad}
    params.update({f"input{i}": x for i, x in enumerate(inputs)})

    def loss() -> Tensor:
        return (module(*inputs) * proj).sum()

    report = grad_check(loss, params, tol=tol, h=h)
    worst, err = report.worst()
    return CaseResult(name, seed, err, worst, len(params))


def run_suite(
    seeds: Iterable[int] = range(20),
    tol: float = 1e-6,
    cases: Iterable[str] | None = None,
) -> tuple[list[CaseResult], float]:
    """All (case, seed) results and the wall time in seconds."""
    start = time.perf_counter()
    names = list(CASES) if cases is None else list(cases)
    results = [check_case(n, s, tol) for s in seeds for n in names]
    return results, time.perf_counter() - start

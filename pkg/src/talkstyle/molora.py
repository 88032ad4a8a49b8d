"""Mixture-of-LoRA adapters for linear and 1-D convolution layers.

A conv weight ``W0`` of shape ``m x n x k`` receives ``N`` factor pairs, one per
rank ``r``: ``B`` is ``(m/r * k) x (r * k)`` and ``A`` is ``(r * k) x (n * r)``.
Their product is viewed as ``(m/r, k, n, r)`` and rearranged to ``(m, n, k)``,
and the deltas of all ranks are summed onto ``W0``. Linear layers go through
the same path with ``k = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import Tensor, nn

from .errors import ConfigError, StateError
from .numkit import WeightLayer

EXCLUDED_PREFIXES = ("audio_encoder",)
# output projections to 53 expression dims and the 16-dim style vector
EXCLUDED_LAYERS = ("decoder.head", "style_encoder.out")


def default_target(name: str) -> bool:
    """Adapt everything except the audio encoder and the two output projections."""
    if any(name == p or name.startswith(p + ".") for p in EXCLUDED_PREFIXES):
        return False
    return name not in EXCLUDED_LAYERS


@dataclass
class MoLoRAConfig:
    ranks: list[int] = field(default_factory=lambda: [4, 8, 16, 32])
    scales: list[float] | None = None
    target: Callable[[str], bool] = default_target
    init_std: float = 0.02

    def __post_init__(self) -> None:
        self.ranks = [int(r) for r in self.ranks]
        if any(r <= 0 for r in self.ranks):
            raise ConfigError(f"MoLoRA ranks must be positive, got {self.ranks}")
        if len(set(self.ranks)) != len(self.ranks):
            raise ConfigError(f"MoLoRA ranks must be distinct, got {self.ranks}")
        if self.scales is None:
            self.scales = [1.0] * len(self.ranks)
        if len(self.scales) != len(self.ranks):
            raise ConfigError("one scale per rank is required")


class LoRAPair(nn.Module):
    def __init__(self, m: int, n: int, k: int, rank: int, init_std: float) -> None:
        super().__init__()
        self.rank = rank
        self.B = nn.Parameter(torch.zeros(m // rank * k, rank * k))
        self.A = nn.Parameter(torch.randn(rank * k, n * rank) * init_std)

    def delta(self, m: int, n: int, k: int) -> Tensor:
        r = self.rank
        prod = self.B @ self.A
        return prod.reshape(m // r, k, n, r).permute(0, 3, 2, 1).reshape(m, n, k)


class MoLoRAAdapter(nn.ModuleList):
    """Factor pairs of one adapted layer; indexable as ``<layer>.molora.<i>``."""

    def __init__(
        self, shape: tuple[int, int, int], ranks: list[int], scales: list[float], init_std: float
    ) -> None:
        m, n, k = shape
        super().__init__(LoRAPair(m, n, k, r, init_std) for r in ranks)
        self.shape = shape
        self.scales = list(scales)

    def delta(self) -> Tensor:
        m, n, k = self.shape
        total = None
        for pair, s in zip(self, self.scales):
            d = pair.delta(m, n, k)
            d = d if s == 1.0 else s * d
            total = d if total is None else total + d
        if total is None:
            return torch.zeros(m, n, k)
        return total


def _weight_shape(layer: WeightLayer) -> tuple[int, int, int]:
    w = layer.weight
    if w.dim() == 2:
        return w.shape[0], w.shape[1], 1
    return w.shape[0], w.shape[1], w.shape[2]


def adapted_layers(model: nn.Module) -> dict[str, WeightLayer]:
    return {
        name: mod
        for name, mod in model.named_modules()
        if isinstance(mod, WeightLayer) and mod.molora is not None
    }


def attach(model: nn.Module, cfg: MoLoRAConfig) -> nn.Module:
    """Install factors on every targeted layer and freeze all base parameters.

    Factor ``A`` draws from the global torch RNG, so seed before calling.
    """
    if adapted_layers(model):
        raise StateError("model already carries MoLoRA factors")
    targets = [
        (name, mod)
        for name, mod in model.named_modules()
        if isinstance(mod, WeightLayer) and cfg.target(name)
    ]
    for name, mod in targets:
        m = _weight_shape(mod)[0]
        bad = [r for r in cfg.ranks if m % r]
        if bad:
            raise ConfigError(f"layer {name}: ranks {bad} do not divide output size {m}")
    for p in model.parameters():
        p.requires_grad_(False)
    if not cfg.ranks:
        return model
    for name, mod in targets:
        mod.molora = MoLoRAAdapter(_weight_shape(mod), cfg.ranks, cfg.scales, cfg.init_std)
    return model


def delta_weight(model: nn.Module, layer: str) -> Tensor:
    layers = adapted_layers(model)
    if layer not in layers:
        raise StateError(f"layer {layer} carries no MoLoRA factors")
    mod = layers[layer]
    return mod.molora.delta().reshape(mod.weight.shape)


@torch.no_grad()
def merge(model: nn.Module) -> dict[str, Tensor]:
    """Bake ``W0 + dW`` into every adapted layer and drop the factors.

    Returns the per-layer deltas so :func:`unmerge` can undo the merge.
    """
    layers = adapted_layers(model)
    if not layers:
        raise StateError("model carries no MoLoRA factors (already merged?)")
    deltas = {}
    for name, mod in layers.items():
        deltas[name] = mod.molora.delta().reshape(mod.weight.shape).clone()
        mod.weight.copy_(mod.effective_weight())
        mod.molora = None
    for p in model.parameters():
        p.requires_grad_(True)
    return deltas


@torch.no_grad()
def unmerge(model: nn.Module, deltas: dict[str, Tensor]) -> None:
    modules = dict(model.named_modules())
    for name, d in deltas.items():
        modules[name].weight.sub_(d)


def count_trainable(model: nn.Module) -> int:
    return sum(
        p.numel() for mod in adapted_layers(model).values() for p in mod.molora.parameters()
    )


def count_formula(shapes: list[tuple[int, int, int]], ranks: list[int]) -> int:
    """Analytic factor count for layers of shape ``(m, n, k)``."""
    return sum((m // r * k) * (r * k) + (r * k) * (n * r) for m, n, k in shapes for r in ranks)


def factor_tensors(model: nn.Module) -> dict[str, Tensor]:
    """Factor tensors keyed ``<layer>.molora.<i>.A`` / ``.B``."""
    return {n: p for n, p in model.named_parameters() if ".molora." in n}

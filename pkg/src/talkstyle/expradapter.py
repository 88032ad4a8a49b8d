"""Expression adapter: speech, identity and style encoders feeding a residual decoder.

Pretraining fits every weight with an MSE loss, using each sample's own
expression sequence as the style input. Adaptation attaches MoLoRA factors
and updates only those, for a fixed small number of steps on one reference clip.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import molora
from .errors import InputError, TrainingError
from .numkit import Adam, ConformerBlock, Conv1d, LayerNorm, Linear
from .synthcorpus import EXPR_DIM, ID_DIM, SPEECH_DIM, Sample

ADAPT_STEPS = 30


@dataclass
class ExprConfig:
    d: int = 64
    heads: int = 4
    kernel: int = 5
    d_style: int = 16
    speech_dim: int = SPEECH_DIM
    expr_dim: int = EXPR_DIM
    id_dim: int = ID_DIM
    audio_layers: int = 2
    style_layers: int = 2
    decoder_layers: int = 3
    id_layers: int = 3


class AudioEncoder(nn.Module):
    def __init__(self, cfg: ExprConfig) -> None:
        super().__init__()
        self.inp = Linear(cfg.speech_dim, cfg.d)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.d, cfg.heads, cfg.kernel) for _ in range(cfg.audio_layers)
        )

    def forward(self, speech: Tensor) -> Tensor:
        h = self.inp(speech)
        for block in self.blocks:
            h = block(h)
        return h


class IdentityEncoder(nn.Module):
    """Convolutions with identity-conditioned layer norm over a one-frame sequence."""

    def __init__(self, cfg: ExprConfig) -> None:
        super().__init__()
        dims = [cfg.id_dim] + [cfg.d] * cfg.id_layers
        self.convs = nn.ModuleList(Conv1d(a, b, 3) for a, b in zip(dims, dims[1:]))
        self.norms = nn.ModuleList(LayerNorm(cfg.d, cond_dim=cfg.id_dim) for _ in dims[1:])

    def forward(self, beta: Tensor) -> Tensor:
        h = beta.unsqueeze(-2)
        for conv, norm in zip(self.convs, self.norms):
            h = F.silu(norm(conv(h), beta))
        return h.squeeze(-2)


class StyleEncoder(nn.Module):
    """Conformer stack without positional input, mean-pooled over time."""

    def __init__(self, cfg: ExprConfig) -> None:
        super().__init__()
        self.inp = Linear(cfg.expr_dim, cfg.d)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.d, cfg.heads, cfg.kernel, circular=True)
            for _ in range(cfg.style_layers)
        )
        self.out = Linear(cfg.d, cfg.d_style)

    def forward(self, expr: Tensor) -> Tensor:
        h = self.inp(expr)
        for block in self.blocks:
            h = block(h)
        return self.out(h.mean(dim=-2))


class ExprDecoder(nn.Module):
    """Blocks whose outputs are summed before one linear head."""

    def __init__(self, cfg: ExprConfig) -> None:
        super().__init__()
        self.inp = Linear(2 * cfg.d + cfg.d_style, cfg.d)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.d, cfg.heads, cfg.kernel) for _ in range(cfg.decoder_layers)
        )
        self.head = Linear(cfg.d, cfg.expr_dim)

    def block_outputs(self, audio: Tensor, ident: Tensor, style: Tensor) -> list[Tensor]:
        ident = ident.unsqueeze(-2).expand(*audio.shape[:-1], ident.shape[-1])
        style = style.unsqueeze(-2).expand(*audio.shape[:-1], style.shape[-1])
        h = self.inp(torch.cat([audio, ident, style], dim=-1))
        outs = []
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        return outs

    def forward(self, audio: Tensor, ident: Tensor, style: Tensor) -> Tensor:
        return self.head(sum(self.block_outputs(audio, ident, style)))


class ExpressionAdapter(nn.Module):
    def __init__(self, cfg: ExprConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg = cfg or ExprConfig()
        self.audio_encoder = AudioEncoder(cfg)
        self.identity_encoder = IdentityEncoder(cfg)
        self.style_encoder = StyleEncoder(cfg)
        self.decoder = ExprDecoder(cfg)

    def encode_audio(self, speech: Tensor) -> Tensor:
        return self.audio_encoder(speech)

    def encode_identity(self, beta: Tensor) -> Tensor:
        return self.identity_encoder(beta)

    def encode_style(self, expr: Tensor) -> Tensor:
        return self.style_encoder(expr)

    def forward(self, speech: Tensor, beta: Tensor, style_expr: Tensor) -> Tensor:
        return self.decoder(
            self.encode_audio(speech), self.encode_identity(beta), self.encode_style(style_expr)
        )


@dataclass
class ExprHistory:
    loss: list[float] = field(default_factory=list)


def _stack(samples: Sequence[Sample]) -> tuple[Tensor, Tensor, Tensor]:
    speech = torch.as_tensor(np.stack([s.speech.features for s in samples]), dtype=torch.float32)
    beta = torch.as_tensor(np.stack([s.identity for s in samples]), dtype=torch.float32)
    expr = torch.as_tensor(np.stack([s.expr for s in samples]), dtype=torch.float32)
    return speech, beta, expr


def _fit(
    model: nn.Module,
    speech: Tensor,
    beta: Tensor,
    expr: Tensor,
    steps: int,
    lr: float,
    batch_size: int,
    gen: torch.Generator,
    history: ExprHistory,
    crop: int | None = None,
) -> None:
    opt = Adam(model.named_parameters(), lr=lr)
    T = expr.shape[1]
    for step in range(steps):
        if len(expr) > batch_size:
            pick = torch.randperm(len(expr), generator=gen)[:batch_size]
        else:
            pick = torch.arange(len(expr))
        window = slice(None)
        if crop and crop < T:
            start = int(torch.randint(0, T - crop + 1, (1,), generator=gen))
            window = slice(start, start + crop)
        sp, tgt = speech[pick][:, window], expr[pick][:, window]
        # the target sequence doubles as the style input
        loss = F.mse_loss(model(sp, beta[pick], tgt), tgt)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite expression loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.loss.append(loss.item())


def pretrain(
    samples: Sequence[Sample],
    cfg: ExprConfig | None = None,
    steps: int = 3000,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 8,
    crop: int | None = 48,
) -> tuple[ExpressionAdapter, ExprHistory]:
    """MSE pretraining on random ``crop``-frame windows; deterministic per seed."""
    torch.manual_seed(seed)
    model = ExpressionAdapter(cfg)
    history = ExprHistory()
    if steps:
        speech, beta, expr = _stack(samples)
        gen = torch.Generator().manual_seed(seed + 1)
        _fit(model, speech, beta, expr, steps, lr, batch_size, gen, history, crop)
    return model, history


def adapt(
    model: ExpressionAdapter,
    reference: Sample | Sequence[Sample],
    cfg: molora.MoLoRAConfig | None = None,
    steps: int = ADAPT_STEPS,
    seed: int = 0,
    lr: float = 1e-3,
) -> tuple[ExpressionAdapter, ExprHistory]:
    """Return an adapted copy; only MoLoRA factors change, the input model is untouched."""
    refs = [reference] if isinstance(reference, Sample) else list(reference)
    if not refs or any(r.T == 0 for r in refs):
        raise InputError("adaptation needs a non-empty reference clip")
    cfg = cfg or molora.MoLoRAConfig()
    adapted = copy.deepcopy(model)
    torch.manual_seed(seed)
    molora.attach(adapted, cfg)
    history = ExprHistory()
    if cfg.ranks and steps:
        speech, beta, expr = _stack(refs)
        gen = torch.Generator().manual_seed(seed + 1)
        _fit(adapted, speech, beta, expr, steps, lr, len(refs), gen, history)
    return adapted, history


@torch.no_grad()
def infer(
    model: ExpressionAdapter, speech: np.ndarray, beta: np.ndarray, style_expr: np.ndarray
) -> np.ndarray:
    """Expressions for the driving speech, styled by another expression sequence."""
    out = model(
        torch.as_tensor(speech, dtype=torch.float32),
        torch.as_tensor(beta, dtype=torch.float32),
        torch.as_tensor(style_expr, dtype=torch.float32),
    )
    return out.numpy()

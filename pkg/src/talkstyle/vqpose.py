"""VQ-VAE over head-pose sequences.

The encoder downsamples a ``T x 3`` Euler-angle sequence by ``w`` with strided
convolutions, every latent frame snaps to its nearest codebook row, and the
decoder upsamples back to ``T`` frames. The loss adds a codebook term and a
commitment term to an L1 reconstruction loss with velocity and acceleration
terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionError, InputError, StateError, TrainingError
from .numkit import Adam, Conv1d

FPS = 25
PAD = "replicate"  # constant poses map to constant latents, no edge artefacts


@dataclass
class VQConfig:
    M: int = 64
    d_z: int = 16
    w: int = 4
    hidden: int = 64
    gamma: float = 0.25
    alpha1: float = 1.0
    alpha2: float = 1.0


def _stride_factors(w: int) -> list[int]:
    factors, n, p = [], w, 2
    while n > 1:
        while n % p == 0:
            factors.append(p)
            n //= p
        p += 1
    return factors


def pad_to_multiple(x: Tensor, w: int) -> Tensor:
    """Edge-replicate frames along the time axis (``-2``) up to a multiple of ``w``."""
    T = x.shape[-2]
    if T < w:
        raise InputError(f"sequence of {T} frames is shorter than the window w={w}")
    extra = (-T) % w
    if not extra:
        return x
    tail = x[..., -1:, :].expand(*x.shape[:-2], extra, x.shape[-1])
    return torch.cat([x, tail], dim=-2)


def _safe_norm(x: Tensor) -> Tensor:
    """L2 norm over the last axis with a zero (not NaN) gradient at the origin."""
    sq = (x * x).sum(-1)
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def quantize(z: Tensor, codebook: Tensor) -> tuple[Tensor, Tensor]:
    """Nearest codebook row per latent frame (squared L2, lowest index on ties).

    Returns ``(indices, quantized)``; ``quantized`` is differentiable with
    respect to ``codebook`` only.
    """
    if codebook.numel() == 0 or codebook.shape[0] == 0:
        raise StateError("codebook is empty")
    if z.shape[-1] != codebook.shape[-1]:
        raise DimensionError(f"latent dim {z.shape[-1]} != codebook dim {codebook.shape[-1]}")
    with torch.no_grad():
        dist = ((z.detach().unsqueeze(-2) - codebook.detach()) ** 2).sum(-1)
        idx = dist.argmin(dim=-1)
    return idx, codebook[idx]


def straight_through(z: Tensor, zq: Tensor) -> Tensor:
    """Forward value of ``zq``; backward copies the gradient onto ``z``."""
    return z + (zq - z).detach()


def _l1(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-2] == 0:
        return a.new_zeros(())
    return (a - b).abs().mean()


def recon_loss(pred: Tensor, gt: Tensor, alpha1: float = 1.0, alpha2: float = 1.0) -> Tensor:
    """L1 on poses plus weighted L1 on first and second forward differences."""
    if pred.shape != gt.shape:
        raise InputError(f"prediction {tuple(pred.shape)} vs target {tuple(gt.shape)}")
    vp, vg = pred.diff(dim=-2), gt.diff(dim=-2)
    loss = _l1(pred, gt) + alpha1 * _l1(vp, vg)
    if alpha2:
        loss = loss + alpha2 * _l1(vp.diff(dim=-2), vg.diff(dim=-2))
    return loss


class Encoder(nn.Module):
    def __init__(self, cfg: VQConfig) -> None:
        super().__init__()
        self.inp = Conv1d(3, cfg.hidden, 3, padding=PAD)
        self.down = nn.ModuleList(
            Conv1d(cfg.hidden, cfg.hidden, 2 * (s // 2) + 1, stride=s, padding=PAD)
            for s in _stride_factors(cfg.w)
        )
        self.out = Conv1d(cfg.hidden, cfg.d_z, 3, padding=PAD)

    def forward(self, x: Tensor) -> Tensor:
        h = F.silu(self.inp(x))
        for conv in self.down:
            h = F.silu(conv(h))
        return self.out(h)


class Decoder(nn.Module):
    """conv -> nearest-frame upsample by ``w`` -> conv -> conv."""

    def __init__(self, cfg: VQConfig) -> None:
        super().__init__()
        self.w = cfg.w
        self.conv1 = Conv1d(cfg.d_z, cfg.hidden, 3, padding=PAD)
        self.conv2 = Conv1d(cfg.hidden, cfg.hidden, 3, padding=PAD)
        self.conv3 = Conv1d(cfg.hidden, 3, 3, padding=PAD)

    def forward(self, q: Tensor) -> Tensor:
        h = F.silu(self.conv1(q))
        h = h.repeat_interleave(self.w, dim=-2)
        h = F.silu(self.conv2(h))
        return self.conv3(h)


class VQVAE(nn.Module):
    def __init__(self, cfg: VQConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg or VQConfig()
        if self.cfg.M < 2:
            raise InputError("codebook needs at least 2 entries")
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        M = self.cfg.M
        self.codebook = nn.Parameter(torch.empty(M, self.cfg.d_z).uniform_(-1.0 / M, 1.0 / M))
        self.register_buffer("usage", torch.zeros(M))

    def encode(self, pose: Tensor) -> Tensor:
        """``(..., T, 3)`` poses -> ``(..., T/w, d_z)`` latents (after edge padding)."""
        return self.encoder(pad_to_multiple(pose, self.cfg.w))

    def quantize(self, z: Tensor) -> tuple[Tensor, Tensor]:
        return quantize(z, self.codebook)

    def decode(self, q: Tensor) -> Tensor:
        return self.decoder(q)

    def decode_codes(self, codes: Tensor) -> Tensor:
        return self.decode(self.codebook[codes])

    def codes(self, pose: Tensor) -> Tensor:
        with torch.no_grad():
            return self.quantize(self.encode(pose))[0]

    def reconstruct(self, pose: Tensor) -> Tensor:
        with torch.no_grad():
            z = self.encode(pose)
            return self.decode(self.quantize(z)[1])[..., : pose.shape[-2], :]

    def loss_terms(self, pose: Tensor) -> dict[str, Tensor]:
        cfg = self.cfg
        target = pad_to_multiple(pose, cfg.w)
        z = self.encoder(target)
        idx, zq = self.quantize(z)
        pred = self.decode(straight_through(z, zq))
        return {
            "loss": vq_objective(pred, target, z, zq, cfg.gamma, cfg.alpha1, cfg.alpha2),
            "l1": (pred - target).abs().mean(),
            "indices": idx,
        }

    def vq_loss(self, pose: Tensor) -> Tensor:
        return self.loss_terms(pose)["loss"]


def vq_objective(
    pred: Tensor, gt: Tensor, z: Tensor, zq: Tensor, gamma: float, alpha1: float, alpha2: float
) -> Tensor:
    """Reconstruction + ``||sg[z] - zq||`` + ``gamma * ||z - sg[zq]||`` (frame-mean L2 norms)."""
    return (
        recon_loss(pred, gt, alpha1, alpha2)
        + _safe_norm(z.detach() - zq).mean()
        + gamma * _safe_norm(z - zq.detach()).mean()
    )


@dataclass
class VQHistory:
    loss: list[float] = field(default_factory=list)
    l1: list[float] = field(default_factory=list)
    usage: list[int] = field(default_factory=list)


def train_vqvae(
    poses: Sequence[np.ndarray] | Tensor,
    cfg: VQConfig | None = None,
    steps: int = 2000,
    seed: int = 0,
    lr: float = 2e-3,
    batch_size: int = 16,
) -> tuple[VQVAE, VQHistory]:
    """Fit a VQ-VAE to equal-length pose sequences; deterministic per seed."""
    torch.manual_seed(seed)
    model = VQVAE(cfg)
    history = VQHistory()
    if steps == 0:
        return model, history
    data = torch.as_tensor(np.stack([np.asarray(p) for p in poses]), dtype=torch.float32)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = Adam(model.named_parameters(), lr=lr)
    for step in range(steps):
        if len(data) > batch_size:
            batch = data[torch.randperm(len(data), generator=gen)[:batch_size]]
        else:
            batch = data
        terms = model.loss_terms(batch)
        loss = terms["loss"]
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite VQ-VAE loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.loss.append(loss.item())
        history.l1.append(terms["l1"].item())
    with torch.no_grad():
        idx = model.quantize(model.encode(data))[0]
        model.usage.copy_(torch.bincount(idx.flatten(), minlength=model.cfg.M).float())
    history.usage = [int(c) for c in model.usage.tolist()]
    return model, history

"""Autoregressive pose-code predictor conditioned on speech and a style embedding.

Conditioning is added to the token embedding at every position; the stack of
causal transformer blocks then predicts the next pose code. Index ``M`` is the
start-of-sequence token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InputError, TrainingError
from .numkit import Adam, ConformerBlock, LayerNorm, Linear, sinusoid_positions
from .synthcorpus import SPEECH_DIM
from .vqpose import VQVAE, pad_to_multiple


@dataclass
class PoseGPTConfig:
    M: int = 64
    n_styles: int = 1
    d: int = 64
    heads: int = 4
    layers: int = 2
    d_style: int = 16
    speech_dim: int = SPEECH_DIM
    w: int = 4


def pool_speech(speech: Tensor, w: int) -> Tensor:
    """Mean over non-overlapping windows of ``w`` frames (edge-padded first)."""
    s = pad_to_multiple(speech, w)
    return s.reshape(*s.shape[:-2], s.shape[-2] // w, w, s.shape[-1]).mean(dim=-2)


def cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean next-token cross-entropy in nats."""
    M = logits.shape[-1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= M):
        raise InputError(f"code index outside [0, {M})")
    return F.cross_entropy(logits.reshape(-1, M), targets.reshape(-1))


class PoseGPT(nn.Module):
    def __init__(self, cfg: PoseGPTConfig | None = None) -> None:
        super().__init__()
        self.cfg = cfg = cfg or PoseGPTConfig()
        self.speech_proj = Linear(cfg.speech_dim, cfg.d)
        self.style_table = nn.Parameter(torch.randn(cfg.n_styles, cfg.d_style) * 0.5)
        self.cond_proj = Linear(cfg.d + cfg.d_style, cfg.d)
        self.tok_emb = nn.Parameter(torch.randn(cfg.M + 1, cfg.d) * 0.5)
        self.blocks = nn.ModuleList(
            ConformerBlock(cfg.d, cfg.heads, causal=True, use_conv=False) for _ in range(cfg.layers)
        )
        self.norm = LayerNorm(cfg.d)
        self.head = Linear(cfg.d, cfg.M)

    @property
    def sos(self) -> int:
        return self.cfg.M

    def style_embedding(self, style_ids: Tensor) -> Tensor:
        style_ids = torch.as_tensor(style_ids)
        if style_ids.numel() and (style_ids.min() < 0 or style_ids.max() >= self.cfg.n_styles):
            raise InputError(f"style id outside [0, {self.cfg.n_styles})")
        return self.style_table[style_ids]

    def condition_features(self, speech: Tensor, style_ids: Tensor) -> Tensor:
        """Per-window ``[speech projection | style embedding]`` before the width projection."""
        pooled = self.speech_proj(pool_speech(speech, self.cfg.w))
        style = self.style_embedding(style_ids)
        style = style.unsqueeze(-2).expand(*pooled.shape[:-1], style.shape[-1])
        return torch.cat([pooled, style], dim=-1)

    def condition(self, speech: Tensor, style_ids: Tensor) -> Tensor:
        return self.cond_proj(self.condition_features(speech, style_ids))

    def forward_logits(self, prefix: Tensor, cond: Tensor) -> Tensor:
        """Next-code logits for each position of ``[SOS] + prefix`` (capped at ``T'``).

        Output position ``t`` sees codes before ``t`` and conditioning up to ``t``.
        """
        Tc = cond.shape[-2]
        L = prefix.shape[-1]
        if L > Tc:
            raise InputError(f"prefix of {L} codes is longer than the conditioning ({Tc})")
        if prefix.numel() and (prefix.min() < 0 or prefix.max() >= self.cfg.M):
            raise InputError(f"code index outside [0, {self.cfg.M})")
        sos = torch.full((*prefix.shape[:-1], 1), self.sos, dtype=torch.long)
        tokens = torch.cat([sos, prefix.long()], dim=-1)[..., :Tc]
        n = tokens.shape[-1]
        h = self.tok_emb[tokens] + cond[..., :n, :] + sinusoid_positions(n, self.cfg.d, cond.dtype)
        for block in self.blocks:
            h = block(h)
        return self.head(self.norm(h))

    def tf_loss(self, codes: Tensor, cond: Tensor) -> Tensor:
        if codes.shape[-1] != cond.shape[-2]:
            raise InputError(f"{codes.shape[-1]} target codes vs {cond.shape[-2]} conditioning frames")
        return cross_entropy(self.forward_logits(codes, cond), codes)

    @torch.no_grad()
    def greedy_decode(self, cond: Tensor, length: int | None = None) -> Tensor:
        """Argmax decoding, lowest index on ties; ``cond`` is ``(..., T', d)``."""
        length = cond.shape[-2] if length is None else length
        if length > cond.shape[-2]:
            raise InputError(f"cannot decode {length} codes from {cond.shape[-2]} frames")
        codes = torch.zeros((*cond.shape[:-2], 0), dtype=torch.long)
        for _ in range(length):
            logits = self.forward_logits(codes, cond)[..., -1, :]
            codes = torch.cat([codes, logits.argmax(dim=-1, keepdim=True)], dim=-1)
        return codes


@dataclass
class GPTHistory:
    loss: list[float] = field(default_factory=list)
    replace_prob: list[float] = field(default_factory=list)


def replace_probability(step: int, steps: int, tf_fraction: float) -> float:
    """0 during the teacher-forcing phase, then linear up to 1 at the last step."""
    if not 0.0 <= tf_fraction <= 1.0:
        raise InputError(f"tf_fraction must lie in [0, 1], got {tf_fraction}")
    tf_steps = int(round(tf_fraction * steps))
    if step < tf_steps:
        return 0.0
    return (step - tf_steps + 1) / (steps - tf_steps)


def train_schedule(
    codes: Sequence[np.ndarray] | Tensor,
    speech: Sequence[np.ndarray] | Tensor,
    style_ids: Sequence[int],
    cfg: PoseGPTConfig,
    steps: int = 3000,
    tf_fraction: float = 0.5,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
    crop: int | None = None,
) -> tuple[PoseGPT, GPTHistory]:
    """Teacher forcing for ``tf_fraction`` of the steps, then scheduled sampling.

    After the teacher-forcing phase each input position is replaced by the
    model's own greedy prediction with a probability that rises linearly to 1.
    With ``crop`` set, every step trains on a random window of that many codes
    (and the matching speech frames), so a clip cannot be recalled by position.
    """
    torch.manual_seed(seed)
    model = PoseGPT(cfg)
    history = GPTHistory()
    if steps == 0:
        return model, history
    codes = torch.as_tensor(np.stack([np.asarray(c) for c in codes]), dtype=torch.long)
    speech = torch.as_tensor(np.stack([np.asarray(s) for s in speech]), dtype=torch.float32)
    ids = torch.as_tensor(list(style_ids), dtype=torch.long)
    gen = torch.Generator().manual_seed(seed + 1)
    mix_gen = torch.Generator().manual_seed(seed + 2)
    opt = Adam(model.named_parameters(), lr=lr)
    for step in range(steps):
        if len(codes) > batch_size:
            pick = torch.randperm(len(codes), generator=gen)[:batch_size]
        else:
            pick = torch.arange(len(codes))
        tgt, sp = codes[pick], speech[pick]
        if crop and crop < tgt.shape[-1]:
            start = int(torch.randint(0, tgt.shape[-1] - crop + 1, (1,), generator=gen))
            tgt = tgt[:, start : start + crop]
            sp = sp[:, start * cfg.w : (start + crop) * cfg.w]
        cond = model.condition(sp, ids[pick])
        if tgt.shape[-1] != cond.shape[-2]:
            raise InputError(f"{tgt.shape[-1]} target codes vs {cond.shape[-2]} conditioning frames")
        p = replace_probability(step, steps, tf_fraction)
        inputs = tgt
        if p > 0:
            with torch.no_grad():
                pred = model.forward_logits(tgt, cond).argmax(dim=-1)
            mask = torch.rand(tgt.shape, generator=mix_gen) < p
            inputs = torch.where(mask, pred, tgt)
        loss = cross_entropy(model.forward_logits(inputs, cond), tgt)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite PoseGPT loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.loss.append(loss.item())
        history.replace_prob.append(p)
    return model, history


@torch.no_grad()
def generate(gpt: PoseGPT, vq: VQVAE, speech: np.ndarray, style_id: int) -> np.ndarray:
    """Greedy pose sequence for ``speech`` (``T x speech_dim``) in the given style: ``T x 3``."""
    sp = torch.as_tensor(speech, dtype=torch.float32)
    cond = gpt.condition(sp, torch.tensor(int(style_id)))
    codes = gpt.greedy_decode(cond)
    return vq.decode_codes(codes)[: sp.shape[-2]].numpy()

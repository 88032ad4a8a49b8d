"""Dense numeric kernel: layer primitives, Adam, gradient checking, tensor files.

Sequences are time-major, ``(..., T, C)``. Every layer is a thin torch module so
that autograd supplies the backward pass; :func:`grad_check` verifies those
gradients against central finite differences in 64-bit mode.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, DimensionError, LoadError, TrainingError

RUN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64
LN_EPS = 1e-5


def set_threads(default: int = 1) -> int:
    """Cap torch worker threads from ``ADAMESH_THREADS`` (default 1)."""
    raw = os.environ.get("ADAMESH_THREADS", "")
    try:
        n = int(raw) if raw else default
    except ValueError as exc:
        raise ConfigError(f"ADAMESH_THREADS must be an integer, got {raw!r}") from exc
    n = max(1, n)
    torch.set_num_threads(n)
    return n


# ---------------------------------------------------------------------------
# functional primitives
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y[t] = W x[t] + b`` for ``x`` of shape ``(..., T, n)`` and ``W`` of shape ``(m, n)``."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input dim {tuple(x.shape)} does not match weight {tuple(weight.shape)}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {tuple(bias.shape)} vs weight {tuple(weight.shape)}")
    y = x @ weight.transpose(0, 1)
    return y if bias is None else y + bias


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    groups: int = 1,
    padding: str = "same",
) -> Tensor:
    """Cross-correlation along time.

    ``weight`` is ``(m, n / groups, k)`` with odd ``k``. ``"same"`` zero-pads both
    ends and keeps the length (``ceil(T / stride)`` when strided), ``"causal"``
    zero-pads on the left only, ``"circular"`` wraps around and ``"replicate"``
    repeats the edge frames.
    """
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    n = x.shape[-1]
    if weight.dim() != 3 or weight.shape[1] * groups != n:
        raise DimensionError(
            f"conv1d: input channels {n} do not match weight {tuple(weight.shape)} (groups={groups})"
        )
    lead = x.shape[:-2]
    h = x.reshape(-1, x.shape[-2], n).transpose(1, 2)
    if padding == "causal":
        h = F.pad(h, (k - 1, 0))
    elif padding == "same":
        h = F.pad(h, (k // 2, k // 2))
    elif padding == "circular":
        T = h.shape[-1]
        h = h[..., torch.arange(-(k // 2), T + k // 2) % T]
    elif padding == "replicate":
        T = h.shape[-1]
        h = h[..., torch.arange(-(k // 2), T + k // 2).clamp(0, T - 1)]
    else:
        raise ConfigError(f"unknown conv1d padding {padding!r}")
    y = F.conv1d(h, weight, bias, stride=stride, groups=groups)
    y = y.transpose(1, 2)
    return y.reshape(*lead, y.shape[1], y.shape[2])


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-frame normalisation with population variance, then scale and shift."""
    if x.shape[-1] == 0:
        raise ConfigError("layer_norm over an empty feature dimension")
    return F.layer_norm(x, x.shape[-1:], eps=eps) * gain + shift


def sinusoid_positions(T: int, d: int, dtype: torch.dtype = RUN_DTYPE) -> Tensor:
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(T, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class WeightLayer(nn.Module):
    """Base for layers whose weight can carry MoLoRA factors.

    ``molora`` stays ``None`` until :func:`talkstyle.molora.attach` installs an
    adapter; :meth:`effective_weight` then adds its delta to the frozen base.
    """

    weight: nn.Parameter

    def __init__(self) -> None:
        super().__init__()
        self.molora: nn.Module | None = None

    @property
    def kernel_size(self) -> int:
        return 1 if self.weight.dim() == 2 else self.weight.shape[-1]

    def effective_weight(self) -> Tensor:
        if self.molora is None:
            return self.weight
        return self.weight + self.molora.delta().reshape(self.weight.shape)


class Linear(WeightLayer):
    def __init__(self, n_in: int, n_out: int, bias: bool = True) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_out, n_in) * n_in**-0.5)
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.effective_weight(), self.bias)


class Conv1d(WeightLayer):
    def __init__(
        self,
        n_in: int,
        n_out: int,
        kernel: int,
        *,
        stride: int = 1,
        groups: int = 1,
        padding: str = "same",
        bias: bool = True,
    ) -> None:
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"conv1d kernel size must be odd, got {kernel}")
        if n_in % groups or n_out % groups:
            raise ConfigError(f"channels {n_in}->{n_out} not divisible by groups={groups}")
        fan_in = (n_in // groups) * kernel
        self.weight = nn.Parameter(torch.randn(n_out, n_in // groups, kernel) * fan_in**-0.5)
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None
        self.stride = stride
        self.groups = groups
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(
            x,
            self.effective_weight(),
            self.bias,
            stride=self.stride,
            groups=self.groups,
            padding=self.padding,
        )


class LayerNorm(nn.Module):
    """Layer norm whose gain and shift may be driven by a condition vector.

    With ``cond_dim`` set, ``gain = g0 + G c`` and ``shift = s0 + S c`` using two
    zero-initialised projections, so an untrained conditional norm behaves as
    the plain one.
    """

    def __init__(self, n: int, cond_dim: int | None = None) -> None:
        super().__init__()
        if n <= 0:
            raise ConfigError("layer_norm over an empty feature dimension")
        self.gain = nn.Parameter(torch.ones(n))
        self.shift = nn.Parameter(torch.zeros(n))
        if cond_dim:
            self.cond_gain = Linear(cond_dim, n, bias=False)
            self.cond_shift = Linear(cond_dim, n, bias=False)
            nn.init.zeros_(self.cond_gain.weight)
            nn.init.zeros_(self.cond_shift.weight)
        else:
            self.cond_gain = self.cond_shift = None

    def forward(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        gain, shift = self.gain, self.shift
        if cond is not None:
            if self.cond_gain is None:
                raise ConfigError("condition passed to an unconditional layer norm")
            # cond is (..., c); broadcast over the time axis
            gain = gain + self.cond_gain(cond).unsqueeze(-2)
            shift = shift + self.cond_shift(cond).unsqueeze(-2)
        return layer_norm(x, gain, shift)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int, causal: bool = False) -> None:
        super().__init__()
        if heads <= 0 or d % heads:
            raise ConfigError(f"model width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.causal = causal
        self.qkv = Linear(d, 3 * d)
        self.out = Linear(d, d)

    def attention_weights(self, x: Tensor) -> tuple[Tensor, Tensor]:
        T, d = x.shape[-2], x.shape[-1]
        dh = d // self.heads
        q, k, v = self.qkv(x).split(d, dim=-1)

        def heads(t: Tensor) -> Tensor:
            return t.reshape(*t.shape[:-1], self.heads, dh).transpose(-2, -3)

        q, k, v = heads(q), heads(k), heads(v)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if self.causal:
            future = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
            logits = logits.masked_fill(future, float("-inf"))
        return torch.softmax(logits, dim=-1), v

    def forward(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        q, k, v = (
            t.reshape(*t.shape[:-1], self.heads, d // self.heads).transpose(-2, -3)
            for t in self.qkv(x).split(d, dim=-1)
        )
        y = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        y = y.transpose(-2, -3)
        return self.out(y.reshape(*y.shape[:-2], -1))


class ConvModule(nn.Module):
    """Pointwise -> SiLU -> depthwise conv -> SiLU -> pointwise."""

    def __init__(self, d: int, kernel: int, padding: str = "same") -> None:
        super().__init__()
        self.pw_in = Linear(d, d)
        self.depthwise = Conv1d(d, d, kernel, groups=d, padding=padding)
        self.pw_out = Linear(d, d)

    def forward(self, x: Tensor) -> Tensor:
        h = F.silu(self.pw_in(x))
        h = F.silu(self.depthwise(h))
        return self.pw_out(h)


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int = 2) -> None:
        super().__init__()
        self.fc1 = Linear(d, mult * d)
        self.fc2 = Linear(mult * d, d)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.silu(self.fc1(x)))


class ConformerBlock(nn.Module):
    """Pre-norm residual stack of self-attention, depthwise conv and feed-forward.

    ``use_conv=False`` gives a plain transformer block. In causal mode both the
    attention mask and the depthwise convolution look only at the past;
    ``circular`` wraps the depthwise convolution around the sequence ends.
    """

    def __init__(
        self,
        d: int = 64,
        heads: int = 4,
        kernel: int = 5,
        *,
        causal: bool = False,
        use_conv: bool = True,
        circular: bool = False,
        ff_mult: int = 2,
    ) -> None:
        super().__init__()
        self.norm_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, causal=causal)
        if use_conv:
            self.norm_conv = LayerNorm(d)
            padding = "causal" if causal else "circular" if circular else "same"
            self.conv = ConvModule(d, kernel, padding=padding)
        else:
            self.norm_conv = self.conv = None
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, ff_mult)

    def output_projections(self) -> list[Linear]:
        layers = [self.attn.out, self.ff.fc2]
        if self.conv is not None:
            layers.append(self.conv.pw_out)
        return layers

    def zero_output_projections(self) -> None:
        with torch.no_grad():
            for layer in self.output_projections():
                layer.weight.zero_()
                layer.bias.zero_()

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm_attn(x))
        if self.conv is not None:
            x = x + self.conv(self.norm_conv(x))
        return x + self.ff(self.norm_ff(x))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@torch.no_grad()
def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor],
    moments: Sequence[tuple[Tensor, Tensor]],
    lr: float,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    names: Sequence[str] | None = None,
) -> None:
    """In-place bias-corrected Adam update of ``params``.

    ``moments`` holds the running first/second moment tensor for each param and
    is updated in place. Raises :class:`TrainingError` naming the first
    parameter with a non-finite gradient before anything is modified.
    """
    if t < 1:
        raise ConfigError(f"adam step index must be >= 1, got {t}")
    names = list(names) if names is not None else [str(i) for i in range(len(params))]
    for name, g in zip(names, grads):
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in {name}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, (m, v) in zip(params, grads, moments):
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


class Adam:
    """Adam over the named trainable parameters of a module."""

    def __init__(
        self,
        named_params: Iterable[tuple[str, nn.Parameter]],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        pairs = [(n, p) for n, p in named_params if p.requires_grad]
        self.names = [n for n, _ in pairs]
        self.params = [p for _, p in pairs]
        self.moments = [(torch.zeros_like(p), torch.zeros_like(p)) for p in self.params]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        adam_step(
            self.params,
            grads,
            self.moments,
            self.lr,
            self.t,
            self.betas[0],
            self.betas[1],
            self.eps,
            names=self.names,
        )


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def worst(self) -> tuple[str, float]:
        return max(self.errors.items(), key=lambda kv: kv[1], default=("", 0.0))


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """``max|a - n| / max(max|a|, max|n|, 1e-8)`` over one tensor."""
    diff = (analytic - numeric).abs().max().item() if analytic.numel() else 0.0
    scale = max(
        analytic.abs().max().item() if analytic.numel() else 0.0,
        numeric.abs().max().item() if numeric.numel() else 0.0,
        1e-8,
    )
    return diff / scale


def numeric_grad(loss_fn: Callable[[], Tensor], p: Tensor, h: float = 1e-5) -> Tensor:
    out = torch.zeros_like(p)
    flat = p.data.view(-1)
    g = out.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            g[i] = (up - down) / (2 * h)
    return out


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tol: float = 1e-6,
    h: float = 1e-5,
    analytic: Mapping[str, Tensor] | None = None,
) -> GradCheckReport:
    """Compare autograd (or supplied) gradients with central differences.

    ``loss_fn`` takes no arguments and must read the tensors in ``params``,
    which are perturbed in place. All tensors must be float64.
    """
    for name, p in params.items():
        if p.dtype != CHECK_DTYPE:
            raise ConfigError(f"grad_check needs float64 tensors; {name} is {p.dtype}")
    if analytic is None:
        leaves = list(params.values())
        for p in leaves:
            p.requires_grad_(True)
        loss = loss_fn()
        if loss.requires_grad:
            grads = torch.autograd.grad(loss, leaves, allow_unused=True)
        else:  # loss does not depend on any tensor
            grads = [None] * len(leaves)
        analytic = {
            n: (g if g is not None else torch.zeros_like(p))
            for (n, p), g in zip(params.items(), grads)
        }
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        num = numeric_grad(loss_fn, p, h)
        report.errors[name] = relative_error(analytic[name].detach(), num)
    return report


def trainable(module: nn.Module) -> dict[str, nn.Parameter]:
    return {n: p for n, p in module.named_parameters() if p.requires_grad}


# ---------------------------------------------------------------------------
# MTNS tensor files
# ---------------------------------------------------------------------------

MTNS_MAGIC = b"MTNS"
MTNS_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _as_numpy(t: Tensor | np.ndarray) -> np.ndarray:
    if isinstance(t, Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t)


def encode_tensor(t: Tensor | np.ndarray) -> bytes:
    arr = _as_numpy(t)
    if arr.dtype == np.float64:
        code = 1
    elif arr.dtype == np.float32:
        code = 0
    elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        if arr.size and np.abs(arr).max() >= 2**24:
            raise DimensionError("integer tensor not exactly representable as float32")
        code = 0
    else:
        raise DimensionError(f"unsupported tensor dtype {arr.dtype}")
    arr = np.asarray(arr, dtype=_DTYPES[code], order="C")  # ascontiguousarray would promote 0-d
    header = MTNS_MAGIC + struct.pack("<HBB", MTNS_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one MTNS blob starting at ``offset``; returns the array and the end offset."""
    buf = memoryview(buf)
    if len(buf) - offset < 8 or bytes(buf[offset : offset + 4]) != MTNS_MAGIC:
        raise LoadError("not an MTNS tensor (bad magic)")
    version, code, ndim = struct.unpack_from("<HBB", buf, offset + 4)
    if version != MTNS_VERSION:
        raise LoadError(f"unsupported MTNS version {version}")
    if code not in _DTYPES:
        raise LoadError(f"unknown MTNS dtype code {code}")
    pos = offset + 8
    if len(buf) < pos + 4 * ndim:
        raise LoadError("truncated MTNS header")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise LoadError("truncated MTNS payload")
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
    return arr, pos + nbytes


def save_tensor(path: str | Path, t: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = decode_tensor(data)
    if end != len(data):
        raise LoadError(f"{path}: trailing bytes after tensor")
    return arr

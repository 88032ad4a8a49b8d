"""Checkpoint container: named MTNS tensors plus a JSON config snapshot.

Layout: ``ADMK``, u16 version, u32 tensor count, then per tensor a u32 name
length, the UTF-8 name and an MTNS blob; a trailing u32 CRC32 covers every
preceding byte. The config snapshot travels as the tensor ``__config__``
holding the UTF-8 bytes of its JSON text, one byte per float32 element.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import LoadError
from .expradapter import ExprConfig, ExpressionAdapter
from .molora import MoLoRAConfig, adapted_layers, attach
from .numkit import decode_tensor, encode_tensor
from .posegpt import PoseGPT, PoseGPTConfig
from .vqpose import VQVAE, VQConfig

MAGIC = b"ADMK"
VERSION = 1
CONFIG_KEY = "__config__"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    text = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    items = [(CONFIG_KEY, np.frombuffer(text, dtype=np.uint8).astype(np.float32))]
    items += sorted(ckpt.tensors.items())
    parts = [MAGIC, struct.pack("<HI", VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, encode_tensor(arr)]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 14 or data[:4] != MAGIC:
        raise LoadError("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise LoadError("checkpoint CRC mismatch (truncated or corrupted file)")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise LoadError(f"checkpoint format version {version}, expected {VERSION}")
    pos, tensors, config = 10, {}, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        name = bytes(body[pos + 4 : pos + 4 + n]).decode("utf-8")
        arr, pos = decode_tensor(body, pos + 4 + n)
        if name == CONFIG_KEY:
            config = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
        else:
            tensors[name] = arr
    if pos != len(body):
        raise LoadError("trailing bytes in checkpoint")
    return Checkpoint(tensors, config)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())


def from_module(module: nn.Module, config: dict) -> Checkpoint:
    return Checkpoint({k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}, config)


def load_into(module: nn.Module, ckpt: Checkpoint) -> nn.Module:
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items()}
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise LoadError(f"checkpoint does not fit the model: {exc}") from exc
    return module


# ---------------------------------------------------------------------------
# model checkpoints: the config snapshot records what to rebuild
# ---------------------------------------------------------------------------


def save_expr(path: str | Path, model: ExpressionAdapter, extra: dict | None = None) -> None:
    layers = adapted_layers(model)
    mol = None
    if layers:
        adapter = next(iter(layers.values())).molora
        mol = {"ranks": [p.rank for p in adapter], "scales": list(adapter.scales)}
    config = {"kind": "expr", "model": asdict(model.cfg), "molora": mol, **(extra or {})}
    save_checkpoint(path, from_module(model, config))


def load_expr(path: str | Path) -> tuple[ExpressionAdapter, dict]:
    ckpt = _expect(path, "expr")
    model = ExpressionAdapter(ExprConfig(**ckpt.config["model"]))
    mol = ckpt.config.get("molora")
    if mol:
        attach(model, MoLoRAConfig(ranks=mol["ranks"], scales=mol["scales"]))
    load_into(model, ckpt)
    model.eval()
    return model, ckpt.config


def save_vq(path: str | Path, model: VQVAE, extra: dict | None = None) -> None:
    config = {"kind": "vq", "vq": asdict(model.cfg), **(extra or {})}
    save_checkpoint(path, from_module(model, config))


def load_vq(path: str | Path) -> tuple[VQVAE, dict]:
    ckpt = _expect(path, "vq")
    model = load_into(VQVAE(VQConfig(**ckpt.config["vq"])), ckpt)
    model.eval()
    return model, ckpt.config


def save_posegpt(path: str | Path, model: PoseGPT, extra: dict | None = None) -> None:
    config = {"kind": "posegpt", "gpt": asdict(model.cfg), **(extra or {})}
    save_checkpoint(path, from_module(model, config))


def load_posegpt(path: str | Path) -> tuple[PoseGPT, dict]:
    ckpt = _expect(path, "posegpt")
    model = load_into(PoseGPT(PoseGPTConfig(**ckpt.config["gpt"])), ckpt)
    model.eval()
    return model, ckpt.config


def _expect(path: str | Path, kind: str) -> Checkpoint:
    ckpt = load_checkpoint(path)
    found = ckpt.config.get("kind")
    if found != kind:
        raise LoadError(f"{path}: expected a {kind} checkpoint, found {found!r}")
    return ckpt

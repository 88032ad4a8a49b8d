"""Semantic-aware pose style matrices, the style database, and L1 retrieval.

A style matrix holds, for each of the 512 semantic units, the mean pose latent
over frames carrying that unit. Retrieval returns the database entry with the
smallest elementwise L1 distance over the full zero-filled matrix.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DimensionError, InputError, LoadError, StateError
from .synthcorpus import FPS, N_CLUSTERS, Sample
from .vqpose import VQVAE

ASDB_MAGIC = b"ASDB"
MIN_REFERENCE_FRAMES = 10 * FPS


def downsample_labels(labels: np.ndarray, w: int) -> np.ndarray:
    """Majority label per window of ``w`` frames; ties go to the smallest label."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        return labels
    extra = (-labels.size) % w
    if extra:
        labels = np.concatenate([labels, np.full(extra, labels[-1])])
    out = np.empty(labels.size // w, dtype=np.int64)
    for i, window in enumerate(labels.reshape(-1, w)):
        out[i] = np.bincount(window).argmax()
    return out


@dataclass
class StyleMatrix:
    S: np.ndarray  # 512 x d_z float32
    occupancy: np.ndarray  # 512 bools

    @property
    def d_z(self) -> int:
        return self.S.shape[1]


def compute_style_matrix(z: np.ndarray, labels: np.ndarray, d_z: int | None = None) -> StyleMatrix:
    """Per-unit mean of latent frames; unseen units stay zero.

    Sums are exact (``math.fsum``) so the result does not depend on frame order.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.ndim == 1 and z.size == 0:
        z = z.reshape(0, d_z or 0)
    d = z.shape[1] if d_z is None else d_z
    if len(z) != len(labels):
        raise InputError(f"{len(z)} latent frames vs {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLUSTERS):
        raise InputError(f"labels must lie in [0, {N_CLUSTERS})")
    S = np.zeros((N_CLUSTERS, d), dtype=np.float64)
    occ = np.zeros(N_CLUSTERS, dtype=bool)
    order = np.argsort(labels, kind="stable")
    uniq, starts = np.unique(labels[order], return_index=True)
    for j, group in zip(uniq, np.split(z[order], starts[1:])):
        S[j] = [math.fsum(col) / len(group) for col in group.T]
        occ[j] = True
    return StyleMatrix(S.astype(np.float32), occ)


@dataclass
class StyleDB:
    matrices: list[StyleMatrix] = field(default_factory=list)
    style_ids: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.matrices)

    @property
    def d_z(self) -> int:
        return self.matrices[0].d_z if self.matrices else int(self.meta.get("d_z", 0))

    def add(self, matrix: StyleMatrix, style_id: int) -> None:
        if self.matrices and matrix.d_z != self.d_z:
            raise StateError(f"style matrix d_z {matrix.d_z} does not match database d_z {self.d_z}")
        self.matrices.append(matrix)
        self.style_ids.append(int(style_id))

    def stack(self) -> np.ndarray:
        return np.stack([m.S for m in self.matrices])


def l1_distances(query: StyleMatrix, db: StyleDB) -> np.ndarray:
    return np.abs(db.stack().astype(np.float64) - query.S.astype(np.float64)).sum(axis=(1, 2))


def retrieve(query: StyleMatrix, db: StyleDB) -> tuple[int, float, int]:
    """``(style_id, distance, entry_index)`` of the nearest entry; lowest index on ties."""
    if not len(db):
        raise StateError("style database is empty")
    if query.d_z != db.d_z:
        raise DimensionError(f"query d_z {query.d_z} vs database d_z {db.d_z}")
    dist = l1_distances(query, db)
    k = int(np.argmin(dist))
    return db.style_ids[k], float(dist[k]), k


def sample_style_matrix(vq: VQVAE, pose: np.ndarray, labels: np.ndarray) -> StyleMatrix:
    with torch.no_grad():
        z = vq.encode(torch.as_tensor(pose, dtype=torch.float32)).numpy()
    return compute_style_matrix(z, downsample_labels(labels, vq.cfg.w))


def build_db(
    vq: VQVAE, samples: list[Sample], style_ids: list[int] | None = None, meta: dict | None = None
) -> StyleDB:
    """One entry per sample; by default sample ``k`` gets style id ``k``."""
    style_ids = list(range(len(samples))) if style_ids is None else list(style_ids)
    db = StyleDB(meta=dict(meta or {}))
    db.meta["d_z"] = vq.cfg.d_z
    for sample, sid in zip(samples, style_ids):
        m = sample_style_matrix(vq, sample.pose, sample.speech.labels)
        if m.d_z != vq.cfg.d_z:
            raise StateError("encoder output does not match the codebook dimension")
        db.add(m, sid)
    return db


def adapt(vq: VQVAE, db: StyleDB, pose: np.ndarray, labels: np.ndarray) -> tuple[int, float]:
    """Retrieve the style id for a reference clip without touching any parameters."""
    if not len(db):
        raise StateError("style database is empty")
    if len(pose) < MIN_REFERENCE_FRAMES:
        warnings.warn(
            f"reference clip has {len(pose)} frames; about {MIN_REFERENCE_FRAMES} (10 s) are expected",
            stacklevel=2,
        )
    sid, dist, _ = retrieve(sample_style_matrix(vq, pose, labels), db)
    return sid, dist


# ---------------------------------------------------------------------------
# ASDB files: magic, u32 count, u32 d_z, then per entry u32 id, 64 bytes of
# occupancy bits (LSB first), 512 x d_z float32 little-endian.
# Metadata lives in a sidecar ``<path>.json``.
# ---------------------------------------------------------------------------


def save_db(db: StyleDB, path: str | Path) -> None:
    path = Path(path)
    parts = [ASDB_MAGIC, struct.pack("<II", len(db), db.d_z)]
    for m, sid in zip(db.matrices, db.style_ids):
        parts.append(struct.pack("<I", sid))
        parts.append(np.packbits(m.occupancy.astype(np.uint8), bitorder="little").tobytes())
        parts.append(np.ascontiguousarray(m.S, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))
    Path(str(path) + ".json").write_text(json.dumps(db.meta, indent=2, sort_keys=True) + "\n")


def load_db(path: str | Path) -> StyleDB:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"style database {path} does not exist")
    buf = path.read_bytes()
    if buf[:4] != ASDB_MAGIC or len(buf) < 12:
        raise LoadError(f"{path} is not a style database")
    count, d_z = struct.unpack_from("<II", buf, 4)
    entry = 4 + N_CLUSTERS // 8 + 4 * N_CLUSTERS * d_z
    if len(buf) != 12 + count * entry:
        raise LoadError(f"{path}: size does not match {count} entries of d_z={d_z}")
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    meta["d_z"] = d_z
    db = StyleDB(meta=meta)
    pos = 12
    for _ in range(count):
        (sid,) = struct.unpack_from("<I", buf, pos)
        bits = np.frombuffer(buf, np.uint8, N_CLUSTERS // 8, pos + 4)
        occ = np.unpackbits(bits, bitorder="little").astype(bool)
        S = np.frombuffer(buf, "<f4", N_CLUSTERS * d_z, pos + 4 + N_CLUSTERS // 8)
        db.add(StyleMatrix(S.reshape(N_CLUSTERS, d_z).astype(np.float32), occ), sid)
        pos += entry
    return db

"""Evaluation metrics for expressions and head poses.

Vertex errors are measured on a fixed, seed-pinned linear map from the 53
expression dims to pseudo-vertices: lip vertices read only lip dims and
emotion vertices read only emotion dims.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .errors import InputError, MetricError
from .synthcorpus import EMOTION_DIMS, EXPR_DIM, LIP_DIMS

N_LANDMARKS = 8


@dataclass
class PseudoVertexMap:
    matrix: np.ndarray  # (L*3) x 53
    lip: np.ndarray  # vertex indices
    emotion: np.ndarray

    @classmethod
    def default(cls, seed: int = 7, n_lip: int = 16, n_emotion: int = 16, n_other: int = 16):
        rng = np.random.default_rng(seed)
        L = n_lip + n_emotion + n_other
        W = np.zeros((L, 3, EXPR_DIM))
        lip_idx = np.arange(n_lip)
        emo_idx = np.arange(n_lip, n_lip + n_emotion)
        W[np.ix_(lip_idx, range(3), LIP_DIMS)] = rng.normal(
            scale=len(LIP_DIMS) ** -0.5, size=(n_lip, 3, len(LIP_DIMS))
        )
        W[np.ix_(emo_idx, range(3), EMOTION_DIMS)] = rng.normal(
            scale=len(EMOTION_DIMS) ** -0.5, size=(n_emotion, 3, len(EMOTION_DIMS))
        )
        W[n_lip + n_emotion :] = rng.normal(scale=EXPR_DIM**-0.5, size=(n_other, 3, EXPR_DIM))
        return cls(W.reshape(L * 3, EXPR_DIM), lip_idx, emo_idx)

    def vertices(self, expr: np.ndarray) -> np.ndarray:
        expr = np.asarray(expr, dtype=np.float64)
        return (expr @ self.matrix.T).reshape(len(expr), -1, 3)


DEFAULT_MAP = PseudoVertexMap.default()


def _vertex_errors(pred, gt, vmap: PseudoVertexMap, idx: np.ndarray) -> np.ndarray:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    diff = vmap.vertices(pred)[:, idx] - vmap.vertices(gt)[:, idx]
    return np.linalg.norm(diff, axis=-1)  # T x |idx|


def lve(pred, gt, vmap: PseudoVertexMap = DEFAULT_MAP) -> float:
    """Mean over frames of the worst lip-vertex L2 error."""
    return float(_vertex_errors(pred, gt, vmap, vmap.lip).max(axis=1).mean())


def eve(pred, gt, vmap: PseudoVertexMap = DEFAULT_MAP) -> float:
    """Mean L2 error over emotion vertices and frames."""
    return float(_vertex_errors(pred, gt, vmap, vmap.emotion).mean())


def diversity(seqs: Sequence[np.ndarray]) -> float:
    """Mean pairwise L2 distance between per-sequence temporal means.

    The means are exactly rounded, so frame order never matters.
    """
    if len(seqs) < 2:
        raise InputError("diversity needs at least two sequences")
    means = []
    for s in seqs:
        flat = np.asarray(s, dtype=np.float64).reshape(len(s), -1)
        means.append(np.array([math.fsum(col) / len(flat) for col in flat.T]))
    return float(np.mean([np.linalg.norm(a - b) for a, b in combinations(means, 2)]))


def canonical_landmarks(seed: int = 11, k: int = N_LANDMARKS) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(k, 3))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def euler_to_matrix(angles: np.ndarray) -> np.ndarray:
    """Intrinsic X-Y-Z rotation ``Rx(pitch) @ Ry(yaw) @ Rz(roll)`` per frame."""
    a = np.asarray(angles, dtype=np.float64)
    cx, sx = np.cos(a[:, 0]), np.sin(a[:, 0])
    cy, sy = np.cos(a[:, 1]), np.sin(a[:, 1])
    cz, sz = np.cos(a[:, 2]), np.sin(a[:, 2])
    one, zero = np.ones_like(cx), np.zeros_like(cx)
    Rx = np.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(-1, 3, 3)
    Ry = np.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(-1, 3, 3)
    Rz = np.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(-1, 3, 3)
    return Rx @ Ry @ Rz


def project_landmarks(pose: np.ndarray, landmarks: np.ndarray) -> np.ndarray:
    """Rotate landmarks by each frame's pose and drop depth: ``T x K x 2``."""
    R = euler_to_matrix(pose)
    return np.einsum("tij,kj->tki", R, landmarks)[..., :2]


def lsd(poses: Sequence[np.ndarray], landmarks: np.ndarray | None = None) -> float:
    """Temporal spread of projected landmarks, averaged over landmarks and sequences.

    A landmark's spread is ``sqrt(var_x + var_y)`` with population variances.
    """
    landmarks = canonical_landmarks() if landmarks is None else np.asarray(landmarks, dtype=float)
    vals = []
    for pose in poses:
        xy = project_landmarks(pose, landmarks)
        xy = xy - xy[:1]  # shifted data: exact zero spread for a constant pose
        vals.append(np.sqrt(xy.var(axis=0).sum(axis=-1)).mean())
    return float(np.mean(vals))


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_features(cls, feats: np.ndarray, loading: float = 1e-6) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        sigma = np.atleast_2d(np.cov(feats, rowvar=False))
        return cls(feats.mean(axis=0), sigma + loading * np.eye(feats.shape[1]))


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    a = (a + a.T) / 2
    vals, vecs = np.linalg.eigh(a)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Frechet distance between two Gaussians.

    ``Tr((Sa Sb)^1/2)`` is evaluated as ``Tr((Sa^1/2 Sb Sa^1/2)^1/2)`` with
    symmetric eigendecompositions and eigenvalues clamped at zero.
    """
    mu_a, mu_b = np.atleast_1d(a.mu).astype(float), np.atleast_1d(b.mu).astype(float)
    sa, sb = np.atleast_2d(a.sigma).astype(float), np.atleast_2d(b.sigma).astype(float)
    if mu_a.shape != mu_b.shape or sa.shape != sb.shape:
        raise InputError(f"statistics of dimension {mu_a.shape} vs {mu_b.shape}")
    root_a = _psd_sqrt(sa)
    inner = root_a @ sb @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.clip(vals, 0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb) - 2 * tr_cross)
    return max(d, 0.0)


def pose_features(pose: np.ndarray) -> np.ndarray:
    """Per-frame angles and velocities (first velocity repeated): ``T x 6``."""
    pose = np.asarray(pose, dtype=np.float64)
    vel = np.diff(pose, axis=0, prepend=pose[:1])
    if len(pose) > 1:
        vel[0] = vel[1]
    return np.concatenate([pose, vel], axis=1)


def pose_fid(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray]) -> float:
    g = np.concatenate([pose_features(p) for p in generated])
    r = np.concatenate([pose_features(p) for p in reference])
    return fid(GaussianStats.from_features(g), GaussianStats.from_features(r))


def fsd(
    gen_feats: np.ndarray,
    gen_labels: np.ndarray,
    ref_feats: np.ndarray,
    ref_labels: np.ndarray,
    min_frames: int = 2,
) -> float:
    """Unweighted mean of per-unit FIDs over units with enough frames on both sides."""
    gen_feats, ref_feats = np.asarray(gen_feats, float), np.asarray(ref_feats, float)
    gen_labels, ref_labels = np.asarray(gen_labels).reshape(-1), np.asarray(ref_labels).reshape(-1)
    if len(gen_feats) != len(gen_labels) or len(ref_feats) != len(ref_labels):
        raise InputError("features and labels must have the same number of frames")
    scores = []
    for j in np.intersect1d(gen_labels, ref_labels):
        g, r = gen_feats[gen_labels == j], ref_feats[ref_labels == j]
        if len(g) < min_frames or len(r) < min_frames:
            continue
        scores.append(fid(GaussianStats.from_features(g), GaussianStats.from_features(r)))
    if not scores:
        raise MetricError("no shared semantic unit with enough frames for FSD")
    return float(np.mean(scores))


def pose_fsd(
    generated: Sequence[np.ndarray],
    gen_labels: Sequence[np.ndarray],
    reference: Sequence[np.ndarray],
    ref_labels: Sequence[np.ndarray],
) -> float:
    return fsd(
        np.concatenate([pose_features(p) for p in generated]),
        np.concatenate([np.asarray(l)[: len(p)] for l, p in zip(gen_labels, generated)]),
        np.concatenate([pose_features(p) for p in reference]),
        np.concatenate([np.asarray(l)[: len(p)] for l, p in zip(ref_labels, reference)]),
    )

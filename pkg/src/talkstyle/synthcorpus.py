"""Deterministic synthetic talking-head corpora with known styles.

Speech is a stream of discrete semantic units (512 possible clusters) with
per-cluster feature vectors and a prosody channel. Poses are per-axis
sinusoids plus yaw excursions on trigger units; expressions follow a
per-unit viseme table on the lip dims and a style-dependent offset on the
emotion dims.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .numkit import load_tensor, save_tensor

FPS = 25
N_CLUSTERS = 512
D_SEM = 16
D_PROS = 2
SPEECH_DIM = D_SEM + D_PROS
EXPR_DIM = 53
ID_DIM = 100
LIP_DIMS = tuple(range(0, 8)) + (50, 51, 52)
EMOTION_DIMS = tuple(range(20, 36))
DWELL = (4, 12)
VOCAB_SIZE = 24  # units actually spoken; small enough that clips share most units


def _tables() -> dict[str, np.ndarray]:
    rng = np.random.default_rng(1234)
    emb = rng.normal(size=(N_CLUSTERS, D_SEM))
    viseme = np.tanh(emb @ rng.normal(size=(D_SEM, len(LIP_DIMS))) / np.sqrt(D_SEM) * 1.5)
    emotion = 0.5 * np.tanh(emb @ rng.normal(size=(D_SEM, len(EMOTION_DIMS))) / np.sqrt(D_SEM))
    vocab = np.sort(rng.choice(N_CLUSTERS, size=VOCAB_SIZE, replace=False))
    mean_identity = rng.normal(scale=0.5, size=ID_DIM)
    return {"emb": emb, "viseme": viseme, "emotion": emotion, "vocab": vocab, "identity": mean_identity}


_T = _tables()
CLUSTER_EMBEDDING = _T["emb"]
VISEME_TABLE = _T["viseme"]
EMOTION_TABLE = _T["emotion"]
VOCAB = _T["vocab"]
MEAN_IDENTITY = _T["identity"]
PULSE_LABELS = tuple(int(v) for v in VOCAB[:8])


@dataclass
class SpeechFrames:
    features: np.ndarray  # T x SPEECH_DIM
    labels: np.ndarray  # T ints in [0, 512)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class StyleSpec:
    style_id: int
    name: str = ""
    pose_amplitude: tuple[float, float, float] = (0.05, 0.05, 0.05)
    pose_freq: float = 0.5
    pulse_gain: float = 0.0
    trigger_labels: tuple[int, ...] = PULSE_LABELS
    pose_noise: float = 0.01
    viseme_gain: float = 1.0
    emotion_offset: np.ndarray | None = None
    emotion_gain: float = 0.0
    expr_noise: float = 0.01
    identity_noise: float = 0.05
    identity_spread: float = 0.2

    def validate(self) -> None:
        if not 0 <= self.pose_freq < FPS / 2:
            raise ConfigError(f"style {self.name!r}: frequency {self.pose_freq} Hz not below Nyquist")
        amp = np.abs(np.asarray(self.pose_amplitude, dtype=float))
        peak = amp + np.array([0.0, abs(self.pulse_gain), 0.0]) + 4 * self.pose_noise
        if peak.max() > np.pi / 2:
            raise ConfigError(f"style {self.name!r}: pose amplitude exceeds pi/2")
        if self.emotion_offset is not None and np.shape(self.emotion_offset) != (EXPR_DIM,):
            raise ConfigError(f"style {self.name!r}: emotion offset must have {EXPR_DIM} dims")

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["pose_amplitude"] = list(self.pose_amplitude)
        d["trigger_labels"] = list(self.trigger_labels)
        if self.emotion_offset is not None:
            d["emotion_offset"] = [float(v) for v in self.emotion_offset]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "StyleSpec":
        d = dict(d)
        if d.get("emotion_offset") is not None:
            d["emotion_offset"] = np.asarray(d["emotion_offset"], dtype=float)
        d["pose_amplitude"] = tuple(d.get("pose_amplitude", (0.05, 0.05, 0.05)))
        d["trigger_labels"] = tuple(d.get("trigger_labels", PULSE_LABELS))
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad style spec: {exc}") from exc


def _emotion_offset(seed: int, magnitude: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    off = np.zeros(EXPR_DIM)
    off[list(EMOTION_DIMS)] = magnitude * rng.choice([-1.0, 1.0], size=len(EMOTION_DIMS))
    return off


CALM = StyleSpec(
    style_id=0,
    name="calm",
    pose_amplitude=(0.04, 0.06, 0.02),
    pose_freq=0.4,
    pulse_gain=0.05,
    viseme_gain=1.0,
    emotion_offset=np.zeros(EXPR_DIM),
    emotion_gain=0.2,
)
EXCITED = StyleSpec(
    style_id=1,
    name="excited",
    pose_amplitude=(0.06, 0.1, 0.04),
    pose_freq=1.2,
    pulse_gain=0.5,
    trigger_labels=tuple(int(v) for v in VOCAB[:12]),
    viseme_gain=1.0,
    emotion_offset=_emotion_offset(77, 0.6),
    emotion_gain=0.6,
)
FIXTURE_STYLES = {"calm": CALM, "excited": EXCITED}


def gen_speech(T: int, seed: int, vocab: np.ndarray | None = None) -> SpeechFrames:
    """Piecewise-constant unit labels (dwell 4-12 frames) with features and prosody."""
    if T < 1:
        raise InputError("speech needs at least one frame")
    vocab = VOCAB if vocab is None else np.asarray(vocab)
    rng = np.random.default_rng(seed)
    labels = np.empty(T, dtype=np.int64)
    t = 0
    while t < T:
        dwell = int(rng.integers(DWELL[0], DWELL[1] + 1))
        labels[t : t + dwell] = rng.choice(vocab)
        t += dwell
    sem = CLUSTER_EMBEDDING[labels] + rng.normal(scale=0.05, size=(T, D_SEM))
    pulse = np.isin(labels, PULSE_LABELS).astype(float)
    energy = 0.2 + 0.8 * pulse + rng.normal(scale=0.02, size=T)
    phase = rng.uniform(0, 2 * np.pi)
    pitch = 0.3 * np.sin(2 * np.pi * 0.2 * np.arange(T) / FPS + phase) + rng.normal(scale=0.02, size=T)
    feats = np.concatenate([sem, energy[:, None], pitch[:, None]], axis=1)
    return SpeechFrames(feats.astype(np.float32), labels)


def pulse_envelope(labels: np.ndarray, trigger: tuple[int, ...]) -> np.ndarray:
    """Smoothed indicator of trigger units, peak 1."""
    ind = np.isin(labels, trigger).astype(float)
    if not ind.any():
        return ind
    win = np.hanning(9)[1:-1]
    env = np.convolve(ind, win / win.max(), mode="same")
    return np.minimum(env, 1.0)


def gen_pose(speech: SpeechFrames, spec: StyleSpec, seed: int) -> np.ndarray:
    spec.validate()
    rng = np.random.default_rng(seed)
    T = len(speech)
    t = np.arange(T) / FPS
    phase = rng.uniform(0, 2 * np.pi, size=3)
    amp = np.asarray(spec.pose_amplitude, dtype=float)
    pose = amp * np.sin(2 * np.pi * spec.pose_freq * t[:, None] + phase)
    pose[:, 1] += spec.pulse_gain * pulse_envelope(speech.labels, spec.trigger_labels)
    if spec.pose_noise:
        pose += rng.normal(scale=spec.pose_noise, size=pose.shape)
    return np.clip(pose, -np.pi / 2, np.pi / 2).astype(np.float32)


def gen_expr(speech: SpeechFrames, spec: StyleSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Expression sequence ``T x 53`` and the temporally averaged identity ``(100,)``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    T = len(speech)
    expr = np.zeros((T, EXPR_DIM))
    expr[:, list(LIP_DIMS)] = spec.viseme_gain * VISEME_TABLE[speech.labels]
    expr[:, list(EMOTION_DIMS)] = spec.emotion_gain * EMOTION_TABLE[speech.labels]
    if spec.emotion_offset is not None:
        expr += np.asarray(spec.emotion_offset)[None, :]
    if spec.expr_noise:
        expr += rng.normal(scale=spec.expr_noise, size=expr.shape)
    # shared mean face, a per-style deviation and a per-speaker offset;
    # per-frame jitter averages out
    base = MEAN_IDENTITY + np.random.default_rng(10_000 + spec.style_id).normal(scale=0.1, size=ID_DIM)
    speaker = rng.normal(scale=spec.identity_spread, size=ID_DIM)
    identity_seq = base + speaker + rng.normal(scale=spec.identity_noise, size=(T, ID_DIM))
    return expr.astype(np.float32), identity_seq.mean(axis=0).astype(np.float32)


def sinusoid_poses(n: int = 8, T: int = 100, seed: int = 0) -> list[np.ndarray]:
    """Toy pose corpus: per-axis sinusoids with random amplitude, shared frequency and phase."""
    rng = np.random.default_rng(seed)
    t = np.arange(T) / FPS
    out = []
    for _ in range(n):
        amp = rng.uniform(0.1, 0.4, 3)
        freq = rng.uniform(0.3, 1.5)
        phase = rng.uniform(0, 2 * np.pi, 3)
        out.append((amp * np.sin(2 * np.pi * freq * t[:, None] + phase)).astype(np.float32))
    return out


@dataclass
class Sample:
    sample_id: str
    style_id: int
    style_name: str
    speech: SpeechFrames
    pose: np.ndarray
    expr: np.ndarray
    identity: np.ndarray
    seed: int = 0

    @property
    def T(self) -> int:
        return len(self.speech)


@dataclass
class Corpus:
    samples: list[Sample]
    train_ids: list[str] = field(default_factory=list)
    holdout_ids: list[str] = field(default_factory=list)

    def by_id(self, sid: str) -> Sample:
        for s in self.samples:
            if s.sample_id == sid:
                return s
        raise InputError(f"no sample {sid!r} in corpus")

    @property
    def train(self) -> list[Sample]:
        return [self.by_id(i) for i in self.train_ids]

    @property
    def holdout(self) -> list[Sample]:
        return [self.by_id(i) for i in self.holdout_ids]

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "holdout"):
            raise InputError(f"unknown split {name!r}")
        return self.train if name == "train" else self.holdout


def make_sample(spec: StyleSpec, index: int, T: int, seed: int) -> Sample:
    ss = np.random.SeedSequence([seed, spec.style_id, index])
    s_speech, s_pose, s_expr = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    speech = gen_speech(T, s_speech)
    pose = gen_pose(speech, spec, s_pose)
    expr, identity = gen_expr(speech, spec, s_expr)
    name = spec.name or f"style{spec.style_id}"
    return Sample(f"{name}-{index:03d}", spec.style_id, name, speech, pose, expr, identity, seed)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("ADAMESH_THREADS", "1")))
    except ValueError:
        return 1


def make_corpus(specs: list[StyleSpec], n_per_style: int, T: int, seed: int) -> Corpus:
    """``n_per_style`` samples per style with a seeded, per-style 80/20 split."""
    if not specs:
        raise ConfigError("at least one style spec is required")
    for spec in specs:
        spec.validate()
    jobs = [(spec, i) for spec in specs for i in range(n_per_style)]
    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        samples = list(pool.map(lambda job: make_sample(job[0], job[1], T, seed), jobs))
    rng = np.random.default_rng(seed)
    train, holdout = [], []
    for spec in specs:
        ids = [s.sample_id for s in samples if s.style_id == spec.style_id]
        n_hold = int(round(0.2 * len(ids)))
        hold = set(rng.permutation(len(ids))[:n_hold].tolist())
        for k, sid in enumerate(ids):
            (holdout if k in hold else train).append(sid)
    return Corpus(samples, train, holdout)


# ---------------------------------------------------------------------------
# corpus directories: corpus/<split>/<sample-id>/{speech,labels,pose,expr,identity}.mtns + meta.json
# ---------------------------------------------------------------------------


def save_sample(sample: Sample, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "speech.mtns", sample.speech.features)
    save_tensor(directory / "labels.mtns", sample.speech.labels.astype(np.float32))
    save_tensor(directory / "pose.mtns", sample.pose)
    save_tensor(directory / "expr.mtns", sample.expr)
    save_tensor(directory / "identity.mtns", sample.identity)
    meta = {
        "sample_id": sample.sample_id,
        "style_id": sample.style_id,
        "style_name": sample.style_name,
        "T": sample.T,
        "fps": FPS,
        "seed": sample.seed,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_sample(directory: str | Path) -> Sample:
    """Read one sample directory; any MTNS features of the right shape are accepted."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise InputError(f"{directory} is not a sample directory (no meta.json)")
    meta = json.loads(meta_path.read_text())
    labels = load_tensor(directory / "labels.mtns").astype(np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLUSTERS):
        raise InputError(f"{directory}: labels outside [0, {N_CLUSTERS})")
    speech = SpeechFrames(load_tensor(directory / "speech.mtns").astype(np.float32), labels)
    pose = load_tensor(directory / "pose.mtns").astype(np.float32)
    expr = load_tensor(directory / "expr.mtns").astype(np.float32)
    identity = load_tensor(directory / "identity.mtns").astype(np.float32)
    T = len(labels)
    if not (len(speech.features) == len(pose) == len(expr) == T):
        raise InputError(f"{directory}: sequence lengths disagree")
    return Sample(
        meta["sample_id"], int(meta["style_id"]), meta.get("style_name", ""),
        speech, pose, expr, identity, int(meta.get("seed", 0)),
    )


def save_corpus(corpus: Corpus, root: str | Path) -> None:
    root = Path(root)
    for split, ids in (("train", corpus.train_ids), ("holdout", corpus.holdout_ids)):
        for sid in ids:
            save_sample(corpus.by_id(sid), root / split / sid)


def load_corpus(root: str | Path) -> Corpus:
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"corpus directory {root} does not exist")
    samples, ids = [], {"train": [], "holdout": []}
    for split in ("train", "holdout"):
        d = root / split
        if not d.is_dir():
            continue
        for sub in sorted(p for p in d.iterdir() if p.is_dir()):
            s = load_sample(sub)
            samples.append(s)
            ids[split].append(s.sample_id)
    if not samples:
        raise InputError(f"corpus {root} contains no samples")
    return Corpus(samples, ids["train"], ids["holdout"])

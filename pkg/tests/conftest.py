import json
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from talkstyle import expradapter, posegpt, vqpose
from talkstyle import styleretrieval as sr
from talkstyle.synthcorpus import CALM, EXCITED, Corpus, Sample, make_corpus

settings.register_profile(
    "talkstyle", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("talkstyle")

torch.set_num_threads(1)

PRETRAIN_STEPS = 2000
VQ_STEPS = 1000
GPT_STEPS = 1500


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


@dataclass
class ExprRun:
    model: expradapter.ExpressionAdapter
    loss: list
    style_a: Corpus  # pretraining style (calm)
    style_b: Corpus  # unseen style (excited)
    reference: Sample  # 10 s excited clip
    seconds: float


@pytest.fixture(scope="session")
def expr_run() -> ExprRun:
    """Expression model pretrained on calm clips only."""
    start = time.perf_counter()
    a = make_corpus([CALM], 40, 100, 0)
    b = make_corpus([EXCITED], 10, 100, 1)
    ref = make_corpus([EXCITED], 1, 250, 2).samples[0]
    model, hist = expradapter.pretrain(a.train, steps=PRETRAIN_STEPS, seed=0)
    return ExprRun(model, hist.loss, a, b, ref, time.perf_counter() - start)


@dataclass
class PoseRun:
    corpus: Corpus
    vq: vqpose.VQVAE
    vq_l1: list
    db: sr.StyleDB
    gpt: posegpt.PoseGPT
    gpt_loss: list
    seconds: float

    @property
    def train(self) -> list:
        return self.corpus.train

    def holdout(self, style_id: int) -> list:
        return [s for s in self.corpus.holdout if s.style_id == style_id]


@pytest.fixture(scope="session")
def pose_run() -> PoseRun:
    """Two-style pose pipeline: VQ-VAE, style database and PoseGPT (one style id per clip)."""
    start = time.perf_counter()
    corpus = make_corpus([CALM, EXCITED], 10, 250, 0)
    train = corpus.train
    vq, vh = vqpose.train_vqvae([s.pose for s in train], steps=VQ_STEPS, seed=0)
    db = sr.build_db(vq, train)
    codes = [vq.codes(torch.as_tensor(s.pose)).numpy() for s in train]
    gpt, gh = posegpt.train_schedule(
        codes, [s.speech.features for s in train], list(range(len(train))),
        posegpt.PoseGPTConfig(n_styles=len(train)), steps=GPT_STEPS, seed=0, crop=16,
    )
    return PoseRun(corpus, vq, vh.l1, db, gpt, gh.loss, time.perf_counter() - start)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` prints and records one pass/fail line."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.stash[_ACCEPTANCE_KEY].append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# CLI pipeline, run twice in separate directories with relative paths
# ---------------------------------------------------------------------------

PIPELINE_CONFIG = {
    "seed": 0,
    "corpus": "corpus",
    "corpus_gen": {"n_per_style": 3, "T": 100},
    "train": {"pretrain_steps": 30, "adapt_steps": 5, "vq_steps": 40, "posegpt_steps": 40},
}


def talkstyle(*args: str, cwd: Path) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "talkstyle", *args], cwd=cwd, capture_output=True, text=True
    )


@dataclass
class PipelineRun:
    root: Path
    steps: dict = field(default_factory=dict)  # name -> CompletedProcess
    retrieve_index: int = 0

    def files(self) -> dict[str, bytes]:
        return {
            str(p.relative_to(self.root)): p.read_bytes()
            for p in sorted(self.root.rglob("*"))
            if p.is_file()
        }


def run_pipeline(root: Path) -> PipelineRun:
    root.mkdir(parents=True, exist_ok=True)
    (root / "c.json").write_text(json.dumps(PIPELINE_CONFIG))
    run = PipelineRun(root)

    def step(name: str, *args: str) -> None:
        run.steps[name] = talkstyle(*args, cwd=root)

    step("gen-corpus", "gen-corpus", "--config", "c.json", "--out", "corpus")
    train = sorted(p.name for p in (root / "corpus" / "train").iterdir())
    holdout = sorted(p.name for p in (root / "corpus" / "holdout").iterdir())
    ref = "corpus/holdout/" + next(h for h in holdout if h.startswith("excited"))
    drive = "corpus/holdout/" + next(h for h in holdout if h.startswith("calm"))
    run.retrieve_index = len(train) - 1
    step("pretrain-expr", "pretrain-expr", "--config", "c.json", "--out", "expr.ckpt", "--plot")
    step("adapt-expr", "adapt-expr", "--config", "c.json", "--model", "expr.ckpt", "--ref", ref,
         "--out", "adapted.ckpt", "--merge", "--plot")
    step("infer-expr", "infer-expr", "--model", "adapted.ckpt", "--speech", drive, "--style", ref,
         "--out", "pred.mtns")
    step("train-vq", "train-vq", "--config", "c.json", "--out", "vq.ckpt", "--plot")
    step("train-posegpt", "train-posegpt", "--config", "c.json", "--vq", "vq.ckpt", "--out", "gpt.ckpt")
    step("build-styledb", "build-styledb", "--config", "c.json", "--vq", "vq.ckpt", "--out", "styles.asdb")
    step("retrieve", "retrieve", "--db", "styles.asdb", "--ref",
         f"corpus/train/{train[run.retrieve_index]}", "--out", "retrieved.json")
    step("infer-pose", "infer-pose", "--gpt", "gpt.ckpt", "--speech", drive, "--db", "styles.asdb",
         "--ref", ref, "--out", "pose.mtns", "--plot")
    step("eval", "eval", "--config", "c.json", "--ref", ref, "--out", "report",
         "--expr-model", "adapted.ckpt", "--gpt", "gpt.ckpt", "--db", "styles.asdb", "--plot")
    step("grad-check", "grad-check", "--seeds", "1", "--cases", "linear,molora.conv1d",
         "--out", "grad.csv")
    return run


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory) -> tuple[PipelineRun, PipelineRun]:
    base = tmp_path_factory.mktemp("pipeline")
    return run_pipeline(base / "first"), run_pipeline(base / "second")

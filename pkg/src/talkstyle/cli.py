"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 ok, 2 configuration error, 3 data or state error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint as ck
from . import expradapter, gradsuite, metrics, molora, plotting, posegpt, vqpose
from . import styleretrieval as sr
from .config import RunConfig, from_dict, parse_config
from .errors import ConfigError, InputError, TalkStyleError, TrainingError
from .numkit import save_tensor, set_threads
from .synthcorpus import (
    EMOTION_DIMS,
    LIP_DIMS,
    Corpus,
    Sample,
    SpeechFrames,
    load_corpus,
    load_sample,
    make_corpus,
    save_corpus,
)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file (if any) with ``--seed`` and path flags layered on top."""
    if args.config:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
    elif args.seed is not None:
        cfg = from_dict({"seed": args.seed})
    else:
        raise ConfigError("seed: required (pass --seed or a config file with a seed)")
    if args.seed is not None and args.seed < 0:
        raise ConfigError("seed: must be non-negative")
    if getattr(args, "corpus", None):
        cfg.corpus = args.corpus
    return cfg


def _corpus(cfg: RunConfig) -> Corpus:
    if cfg.corpus is None:
        raise ConfigError("corpus: required for this command (--corpus or config key)")
    if not Path(cfg.corpus).is_dir():
        raise ConfigError(f"corpus: {cfg.corpus} does not exist")
    return load_corpus(cfg.corpus)


def _equal_length(arrays: list[np.ndarray]) -> list[np.ndarray]:
    T = min(len(a) for a in arrays)
    return [a[:T] for a in arrays]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _out(path: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _style_order(corpus: Corpus) -> list[Sample]:
    """Training samples in id order; position ``k`` is style id ``k``."""
    return sorted(corpus.train, key=lambda s: s.sample_id)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    gen = cfg.corpus_gen
    n = args.n_per_style if args.n_per_style is not None else gen.n_per_style
    T = args.frames if args.frames is not None else gen.T
    if n < 1 or T < cfg.vq.w:
        raise ConfigError(f"corpus_gen: need n_per_style >= 1 and T >= {cfg.vq.w}")
    out = Path(args.out or cfg.corpus or "")
    if not str(out):
        raise ConfigError("corpus: output directory required (--out)")
    specs = cfg.style_specs()
    corpus = make_corpus(specs, n, T, cfg.seed)
    save_corpus(corpus, out)
    _write_json(
        out / "corpus.json",
        {"seed": cfg.seed, "n_per_style": n, "T": T, "styles": [s.to_json() for s in specs]},
    )
    print(f"wrote {len(corpus.train_ids)} train / {len(corpus.holdout_ids)} holdout samples to {out}")
    return 0


def cmd_pretrain_expr(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    corpus = _corpus(cfg)
    samples = corpus.train
    if args.styles:
        keep = set(args.styles.split(","))
        samples = [s for s in samples if s.style_name in keep]
    if not samples:
        raise InputError("no training samples match the requested styles")
    steps = args.steps if args.steps is not None else cfg.train.pretrain_steps
    T = min(s.T for s in samples)
    samples = [_crop_sample(s, T) for s in samples]
    model, hist = expradapter.pretrain(
        samples, cfg.expr_config(), steps=steps, seed=cfg.seed, lr=cfg.train.lr,
        batch_size=cfg.train.batch_size, crop=cfg.train.crop,
    )
    out = _out(args.out)
    ck.save_expr(out, model, {"seed": cfg.seed, "steps": steps})
    _loss_outputs(out, {"loss": hist.loss}, args.plot, "expression pretraining")
    print(f"pretrained on {len(samples)} samples for {steps} steps -> {out}")
    return 0


def _crop_sample(s: Sample, T: int) -> Sample:
    if s.T == T:
        return s
    return Sample(
        s.sample_id, s.style_id, s.style_name,
        SpeechFrames(s.speech.features[:T], s.speech.labels[:T]),
        s.pose[:T], s.expr[:T], s.identity, s.seed,
    )


def _loss_outputs(ckpt: Path, curves: dict[str, list[float]], plot: bool, title: str) -> None:
    names = list(curves)
    n = max(len(v) for v in curves.values()) if curves else 0
    rows = [[i + 1] + [repr(float(curves[k][i])) for k in names] for i in range(n)]
    _write_csv(ckpt.with_suffix(".loss.csv"), ["step", *names], rows)
    if plot:
        plotting.plot_losses(curves, ckpt.with_suffix(".loss.png"), title)


def cmd_adapt_expr(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    model, _ = ck.load_expr(args.model)
    ref = load_sample(args.ref)
    ranks = [int(r) for r in args.ranks.split(",")] if args.ranks else cfg.molora.ranks
    mcfg = molora.MoLoRAConfig(ranks=ranks, scales=cfg.molora.scales)
    steps = args.steps if args.steps is not None else cfg.train.adapt_steps
    adapted, hist = expradapter.adapt(
        model, ref, mcfg, steps=steps, seed=cfg.seed, lr=cfg.train.adapt_lr
    )
    n_layers = len(molora.adapted_layers(adapted))
    if args.merge and n_layers:
        molora.merge(adapted)
    out = _out(args.out)
    ck.save_expr(out, adapted, {"seed": cfg.seed, "steps": steps, "reference": ref.sample_id})
    _loss_outputs(out, {"loss": hist.loss}, args.plot, "MoLoRA adaptation")
    merged = " (merged)" if args.merge and n_layers else ""
    print(f"adapted {n_layers} layers{merged} on {ref.sample_id} -> {out}")
    return 0


def cmd_infer_expr(args: argparse.Namespace) -> int:
    model, _ = ck.load_expr(args.model)
    drive = load_sample(args.speech)
    style = load_sample(args.style) if args.style else drive
    pred = expradapter.infer(model, drive.speech.features, drive.identity, style.expr)
    save_tensor(_out(args.out), pred)
    print(f"wrote {pred.shape[0]} expression frames -> {args.out}")
    return 0


def cmd_train_vq(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    corpus = _corpus(cfg)
    steps = args.steps if args.steps is not None else cfg.train.vq_steps
    poses = _equal_length([s.pose for s in corpus.train])
    model, hist = vqpose.train_vqvae(poses, cfg.vq, steps=steps, seed=cfg.seed, lr=cfg.train.vq_lr)
    out = _out(args.out)
    ck.save_vq(out, model, {"seed": cfg.seed, "steps": steps})
    _loss_outputs(out, {"loss": hist.loss, "l1": hist.l1}, args.plot, "VQ-VAE training")
    used = sum(1 for c in hist.usage if c > 0)
    print(f"trained VQ-VAE for {steps} steps, {used}/{cfg.vq.M} codes in use -> {out}")
    return 0


def cmd_train_posegpt(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    corpus = _corpus(cfg)
    vq, _ = ck.load_vq(args.vq)
    train = _style_order(corpus)
    T = min(s.T for s in train)
    with torch.no_grad():
        codes = [vq.codes(torch.as_tensor(s.pose[:T])).numpy() for s in train]
    gcfg = posegpt.PoseGPTConfig(
        M=vq.cfg.M, n_styles=len(train), d=cfg.model.d, heads=cfg.model.heads,
        layers=cfg.model.gpt_layers, d_style=cfg.model.d_style, w=vq.cfg.w,
    )
    steps = args.steps if args.steps is not None else cfg.train.posegpt_steps
    model, hist = posegpt.train_schedule(
        codes, [s.speech.features[:T] for s in train], list(range(len(train))), gcfg,
        steps=steps, tf_fraction=cfg.train.tf_fraction, seed=cfg.seed, lr=cfg.train.posegpt_lr,
        crop=cfg.train.posegpt_crop or None,
    )
    out = _out(args.out)
    ck.save_posegpt(
        out, model, {"seed": cfg.seed, "steps": steps, "style_samples": [s.sample_id for s in train]}
    )
    _loss_outputs(out, {"loss": hist.loss}, args.plot, "PoseGPT training")
    print(f"trained PoseGPT on {len(train)} styles for {steps} steps -> {out}")
    return 0


def cmd_build_styledb(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    corpus = _corpus(cfg)
    vq, _ = ck.load_vq(args.vq)
    train = _style_order(corpus)
    meta = {
        "corpus": str(cfg.corpus),
        "seed": cfg.seed,
        "vq": str(args.vq),
        "samples": [s.sample_id for s in train],
    }
    db = sr.build_db(vq, train, meta=meta)
    sr.save_db(db, _out(args.out))
    print(f"stored {len(db)} style matrices -> {args.out}")
    return 0


def _retrieve(db_path: str, vq_path: str | None, ref: Sample):
    db = sr.load_db(db_path)
    vq_path = vq_path or db.meta.get("vq")
    if not vq_path:
        raise ConfigError("vq: checkpoint required (--vq) and not recorded in the database")
    vq, _ = ck.load_vq(vq_path)
    query = sr.sample_style_matrix(vq, ref.pose, ref.speech.labels)
    sid, dist, k = sr.retrieve(query, db)
    names = db.meta.get("samples", [])
    return vq, sid, dist, (names[k] if k < len(names) else None)


def cmd_retrieve(args: argparse.Namespace) -> int:
    ref = load_sample(args.ref)
    _, sid, dist, name = _retrieve(args.db, args.vq, ref)
    print(f"style_id={sid} distance={dist!r} sample={name}")
    if args.out:
        _write_json(Path(args.out), {"style_id": sid, "distance": dist, "sample": name})
    return 0


def cmd_infer_pose(args: argparse.Namespace) -> int:
    gpt, _ = ck.load_posegpt(args.gpt)
    drive = load_sample(args.speech)
    if args.style_id is not None:
        if args.vq is None:
            raise ConfigError("vq: checkpoint required (--vq)")
        vq, _ = ck.load_vq(args.vq)
        sid = args.style_id
    else:
        if not (args.db and args.ref):
            raise ConfigError("pass --style-id, or --db and --ref for retrieval")
        vq, sid, _, _ = _retrieve(args.db, args.vq, load_sample(args.ref))
    pose = posegpt.generate(gpt, vq, drive.speech.features, sid)
    save_tensor(_out(args.out), pose)
    if args.plot:
        plotting.plot_pose_traces(pose, drive.pose, Path(args.out).with_suffix(".png"))
    print(f"style_id={sid}: wrote {len(pose)} pose frames -> {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_run_config(args)
    corpus = _corpus(cfg)
    samples = corpus.split(args.split)
    if len(samples) < 2:
        raise InputError(f"evaluation needs at least two {args.split} samples")
    if not (args.expr_model or args.gpt):
        raise ConfigError("nothing to evaluate: pass --expr-model and/or --gpt")
    ref = load_sample(args.ref)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {
        "lve": None, "eve": None, "div_expr": None,
        "div_pose": None, "lsd": None, "lsd_reference": None, "fid": None, "fsd": None,
        "n_samples": len(samples), "seed": cfg.seed, "split": args.split, "reference": ref.sample_id,
    }
    torch.manual_seed(cfg.seed)
    if args.expr_model:
        model, _ = ck.load_expr(args.expr_model)
        preds = [expradapter.infer(model, s.speech.features, s.identity, ref.expr) for s in samples]
        report["lve"] = float(np.mean([metrics.lve(p, s.expr) for p, s in zip(preds, samples)]))
        report["eve"] = float(np.mean([metrics.eve(p, s.expr) for p, s in zip(preds, samples)]))
        report["div_expr"] = metrics.diversity(preds)
        if args.plot:
            dims = [LIP_DIMS[0], LIP_DIMS[1], EMOTION_DIMS[0], EMOTION_DIMS[1]]
            plotting.plot_expression(preds[0], samples[0].expr, dims, out / "expression.png")
    if args.gpt:
        if not args.db:
            raise ConfigError("db: style database required with --gpt")
        gpt, _ = ck.load_posegpt(args.gpt)
        vq, sid, _, _ = _retrieve(args.db, args.vq, ref)
        report["style_id"] = sid
        gen = [posegpt.generate(gpt, vq, s.speech.features, sid) for s in samples]
        gt = [s.pose for s in samples]
        report["div_pose"] = metrics.diversity(gen)
        report["lsd"] = metrics.lsd(gen)
        report["lsd_reference"] = metrics.lsd(gt)
        report["fid"] = metrics.pose_fid(gen, gt)
        labels = [s.speech.labels for s in samples]
        report["fsd"] = metrics.pose_fsd(gen, labels, gt, labels)
        if args.plot:
            plotting.plot_pose_traces(gen[0], gt[0], out / "pose.png")
    _write_json(out / "report.json", report)
    rows = [[k, repr(v) if isinstance(v, float) else v] for k, v in report.items()]
    _write_csv(out / "report.csv", ["metric", "value"], rows)
    if args.plot:
        plotting.plot_metrics(report, out / "metrics.png")
    print("----- evaluation -----")
    for k, v in report.items():
        print(f"{k:>14s}  {v:.6g}" if isinstance(v, float) else f"{k:>14s}  {v}")
    print("----------------------")
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    cases = args.cases.split(",") if args.cases else None
    if cases:
        unknown = [c for c in cases if c not in gradsuite.CASES]
        if unknown:
            raise ConfigError(f"cases: unknown {unknown}; known {sorted(gradsuite.CASES)}")
    results, seconds = gradsuite.run_suite(range(args.seeds), args.tol, cases)
    worst: dict[str, gradsuite.CaseResult] = {}
    for r in results:
        if r.case not in worst or r.max_error > worst[r.case].max_error:
            worst[r.case] = r
    for name, r in worst.items():
        status = "ok" if r.passed(args.tol) else "FAIL"
        print(f"{name:<24s} max rel err {r.max_error:.3e}  (seed {r.seed}, {r.worst})  {status}")
    print(f"{len(results)} checks over {args.seeds} seeds in {seconds:.1f}s")
    if args.out:
        rows = [[r.case, r.seed, repr(r.max_error), r.worst] for r in results]
        _write_csv(Path(args.out), ["case", "seed", "max_rel_error", "worst_tensor"], rows)
    failed = [r for r in results if not r.passed(args.tol)]
    if failed:
        raise TrainingError(f"{len(failed)} gradient checks above tolerance {args.tol}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, corpus: bool = False) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    if corpus:
        p.add_argument("--corpus", help="corpus directory (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkstyle", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=fn)
        return p

    p = add("gen-corpus", cmd_gen_corpus, "generate a synthetic corpus")
    _common(p)
    p.add_argument("--out", help="output corpus directory")
    p.add_argument("--n-per-style", type=int)
    p.add_argument("--frames", type=int, help="frames per sample")

    p = add("pretrain-expr", cmd_pretrain_expr, "pretrain the expression adapter")
    _common(p, corpus=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--styles", help="comma-separated style names to train on")
    p.add_argument("--plot", action="store_true")

    p = add("adapt-expr", cmd_adapt_expr, "MoLoRA adaptation on a reference clip")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--ref", required=True, help="reference sample directory")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--ranks", help="comma-separated ranks, e.g. 4,8,16,32")
    p.add_argument("--merge", action="store_true", help="bake the factors into the weights")
    p.add_argument("--plot", action="store_true")

    p = add("infer-expr", cmd_infer_expr, "predict expressions for a speech sample")
    p.add_argument("--model", required=True)
    p.add_argument("--speech", required=True, help="driving sample directory")
    p.add_argument("--style", help="sample directory whose expressions set the style")
    p.add_argument("--out", required=True)

    p = add("train-vq", cmd_train_vq, "train the pose VQ-VAE")
    _common(p, corpus=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--plot", action="store_true")

    p = add("train-posegpt", cmd_train_posegpt, "train the pose-code predictor")
    _common(p, corpus=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--plot", action="store_true")

    p = add("build-styledb", cmd_build_styledb, "build the pose style database")
    _common(p, corpus=True)
    p.add_argument("--vq", required=True)
    p.add_argument("--out", required=True)

    p = add("retrieve", cmd_retrieve, "nearest style id for a reference clip")
    p.add_argument("--db", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--vq", help="VQ-VAE checkpoint (default: the one recorded in the database)")
    p.add_argument("--out", help="also write the result as JSON")

    p = add("infer-pose", cmd_infer_pose, "generate head poses for a speech sample")
    p.add_argument("--gpt", required=True)
    p.add_argument("--speech", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--db")
    p.add_argument("--ref")
    p.add_argument("--vq")
    p.add_argument("--style-id", type=int)
    p.add_argument("--plot", action="store_true")

    p = add("eval", cmd_eval, "evaluate models on a corpus split")
    _common(p, corpus=True)
    p.add_argument("--ref", required=True, help="style reference sample directory")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--split", default="holdout", choices=["train", "holdout"])
    p.add_argument("--expr-model")
    p.add_argument("--gpt")
    p.add_argument("--db")
    p.add_argument("--vq")
    p.add_argument("--plot", action="store_true")

    p = add("grad-check", cmd_grad_check, "finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--cases", help="comma-separated subset of cases")
    p.add_argument("--out", help="per-check CSV")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        set_threads()
        return args.func(args)
    except TalkStyleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``mcqa {train,eval,gradcheck,synth-gen,inspect,report}``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from .checkpoint import decode_checkpoint
from .data import SynthConfig, decode_feature_matrix, generate_synthetic, load_manifest
from .network import ModelConfig, tiny_config
from .report import plot_training_curves, read_metric_log
from .train import TrainRun, evaluate, gradcheck, train


def load_config(path: str | None, ablate: str | None) -> ModelConfig:
    cfg = ModelConfig.from_dict(json.loads(Path(path).read_text())) if path else ModelConfig()
    return cfg.with_ablation(ablate) if ablate else cfg


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="ModelConfig as JSON (defaults: the full-size architecture)")
    p.add_argument("--ablate", choices=["none", "fusion", "context-query"], default=None)
    p.add_argument("--seed", type=int, default=0)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.ablate)
    run = TrainRun(cfg, args.manifest, seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
                   lr=args.lr, checkpoint=args.checkpoint, log_path=args.log, val_split=args.val_split,
                   resume=args.resume)
    result = train(run)
    if args.figures:
        out = Path(args.figures)
        out.mkdir(parents=True, exist_ok=True)
        records = read_metric_log(args.log) if args.log else result.metrics
        if records:
            plot_training_curves(records, out / "training_curves.png", title=f"seed {args.seed}")
    return 0


def cmd_eval(args) -> int:
    result = evaluate(args.checkpoint, args.manifest, args.task, split=None if args.split == "all" else args.split)
    if args.predictions:
        with open(args.predictions, "w") as fh:
            for p in result.predictions:
                fh.write(json.dumps({"id": p.id, "logits": p.logits, "predicted": p.predicted,
                                     "correct": p.correct}, sort_keys=True) + "\n")
    print(json.dumps({"task": args.task, "split": args.split, "samples": len(result.predictions),
                      "accuracy": result.accuracy}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = ModelConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else tiny_config()
    if args.ablate:
        cfg = cfg.with_ablation(args.ablate)
    report = gradcheck(cfg, seed=args.seed, eps=args.eps)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def cmd_synth_gen(args) -> int:
    cfg = SynthConfig(seed=args.seed, n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                      seq_len=args.seq_len, question_len=args.seq_len, answer_len=args.seq_len,
                      d_text=args.d_text, d_audio=args.d_audio, d_video=args.d_video, noise=args.noise,
                      magnitude=args.magnitude, n_candidates=args.candidates)
    path, truths = generate_synthetic(cfg, args.out)
    print(json.dumps({"manifest": str(path), "samples": len(truths), **asdict(cfg)}, sort_keys=True))
    return 0


def inspect_path(path: Path) -> dict:
    raw = path.read_bytes()
    if raw[:3] == b"MMF":
        m = decode_feature_matrix(raw, str(path))
        return {"kind": "feature-matrix", "rows": m.shape[0], "cols": m.shape[1],
                "min": float(m.min()), "max": float(m.max()), "mean": float(m.mean())}
    if raw[:8] == b"MCQACKPT":
        ck = decode_checkpoint(raw)
        names = ck.store.names()
        return {"kind": "checkpoint", "config": asdict(ck.config), "meta": ck.meta,
                "adam_step": ck.adam.step, "tensors": len(names),
                "parameters": int(sum(ck.store.value(n).size for n in names)),
                "shapes": {n: list(ck.store.value(n).shape) for n in names}}
    first = raw.split(b"\n", 1)[0]
    obj = json.loads(first) if first.strip() else {}
    if "candidates" in obj or not first.strip():
        man = load_manifest(path)
        splits = {}
        for r in man.records:
            splits[r.split] = splits.get(r.split, 0) + 1
        return {"kind": "manifest", "samples": len(man), "candidates": man.n_candidates, "splits": splits}
    if "epoch" in obj:
        recs = read_metric_log(path)
        acc = [r["val_accuracy"] for r in recs if r.get("val_accuracy") is not None]
        return {"kind": "metric-log", "epochs": len(recs), "final": recs[-1],
                "best_val_accuracy": max(acc) if acc else None}
    raise ValueError(f"{path}: unrecognised file")


def cmd_inspect(args) -> int:
    print(json.dumps(inspect_path(Path(args.path)), indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = read_metric_log(args.log)
    fig = plot_training_curves(records, out / (Path(args.log).stem + ".png"))
    print(f"wrote {fig}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcqa", description="Multimodal co-attention QA: train, evaluate, check.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a manifest's train split")
    p.add_argument("--manifest", required=True)
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--checkpoint", help="where to write the final checkpoint")
    p.add_argument("--log", help="also write the metric log (JSON lines) here")
    p.add_argument("--val-split", default="val", choices=["val", "test"])
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--figures", help="directory for training-curve figures")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="A2/A4 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=["a2", "a4"], required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--predictions", help="write per-sample prediction records (JSON lines) here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model loss")
    _add_model_flags(p)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-gen", help="write the planted cross-modal XOR dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=0)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--d-text", type=int, default=8)
    p.add_argument("--d-audio", type=int, default=4)
    p.add_argument("--d-video", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--candidates", type=int, choices=[2, 4], default=2)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("inspect", help="describe a feature file, manifest, checkpoint or metric log")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="render figures from a metric log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

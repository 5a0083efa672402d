"""Command-line entry point: generate / train / infer / eval / analyze / replay.

Each command writes ``manifest.json`` beside its outputs. ``replay`` re-runs
the command recorded in a manifest. Failures print a single line
``error <ErrorClass>: <message>`` on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .inference import detect, ground_truth
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .spotting_eval import (
    DEFAULT_NMS_DECAY,
    DEFAULT_NMS_WINDOW,
    DEFAULT_THRESHOLD,
    evaluate,
    read_detections,
    read_report,
    score_gap,
    write_detections,
    write_report,
)
from .synth import SynthConfig, build_dataset, load_dataset, load_labels, save_dataset
from .trainer import TrainConfig, TrainingDiverged, TrainLog, lambda_for_sigma, train

HOME_ENV = "DYNSPOT_HOME"
MANIFEST = "manifest.json"
CHECKPOINT = "model.ckpt"
TRAIN_LOG = "train_log.jsonl"

EXIT_FAILURE = 1
EXIT_DIVERGED = 3


class CliError(Exception):
    """Bad inputs detected by the command layer."""


def _default_out(command: str) -> Path:
    return Path(os.environ.get(HOME_ENV, "runs")) / command


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else _default_out(args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_manifest(out: Path, args, config: dict, inputs: dict, outputs: list[str],
                    started: float) -> None:
    recorded = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "args": recorded,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": outputs,
        "version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> None:
    started = time.time()
    make = SynthConfig.ambiguous if args.profile == "ambiguous" else SynthConfig.distinct
    overrides = {"length": args.length, "n_classes": args.n_classes, "d_feat": args.d_feat,
                 "seed": args.seed}
    if args.gain is not None:
        overrides["signature_gain"] = args.gain
    if args.width is not None:
        overrides["signature_width"] = args.width
    config = make(**overrides)
    counts = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    ds = build_dataset(config, counts, sigma=args.sigma, noise_seed=args.noise_seed,
                       eval_length=args.eval_length)
    out = _out_dir(args)
    save_dataset(ds, out)
    _write_manifest(out, args, {"synth": asdict(config), "counts": counts, "sigma": args.sigma},
                    {}, ["dataset.json"] + [f"{s}.bin" for s in ds.splits], started)


# ---------------------------------------------------------------------------
# train

def _train_config(args, sigma: float, distinct: bool) -> TrainConfig:
    lam = args.lambda_time if args.lambda_time is not None else lambda_for_sigma(sigma, distinct)
    return TrainConfig(
        epochs=args.epochs,
        steps_per_epoch=args.steps,
        batch_size=args.batch_size,
        lr_backbone=args.lr_backbone if args.lr_backbone is not None else args.lr,
        lr_transformer=args.lr,
        weight_decay=args.weight_decay,
        warmup_epochs=min(args.warmup, max(args.epochs - 1, 0)),
        lambda_time=lam,
        matching=args.matching.replace("-", "_"),
        mixup=args.mixup,
        dilation=args.dilation,
        aux_losses=not args.no_aux,
        seed=args.seed,
        eval_every=args.eval_every,
        deltas=tuple(args.delta),
    )


def cmd_train(args) -> None:
    started = time.time()
    data = _require(args.data, "dataset")
    ds = load_dataset(data)
    distinct = ds.config.signature_width <= 3
    tcfg = _train_config(args, ds.sigma, distinct)
    mcfg = ModelConfig(n_classes=ds.config.n_classes, d_feat=ds.config.d_feat, d_model=args.d_model,
                       n_enc=args.n_enc, n_dec=args.n_dec, n_heads=args.heads, n_queries=args.nq,
                       d_ff=args.d_ff, window=ds.config.length)
    out = _out_dir(args)
    config = {"model": asdict(mcfg), "train": asdict(tcfg)}
    outputs = [CHECKPOINT, TRAIN_LOG]
    init = init_params(mcfg, seed=tcfg.seed)
    val = ds.splits.get("val") or None
    try:
        params, history = train(mcfg, ds["train"], tcfg, params=init, val_clips=val)
    except TrainingDiverged as exc:
        save_checkpoint(exc.params, out / CHECKPOINT, {"train": asdict(tcfg), "diverged": True})
        exc.log.write(out / TRAIN_LOG)
        _write_manifest(out, args, config, {"data": data}, outputs, started)
        raise
    save_checkpoint(params, out / CHECKPOINT, {"train": asdict(tcfg)})
    history.write(out / TRAIN_LOG)
    _write_manifest(out, args, config, {"data": data}, outputs, started)


# ---------------------------------------------------------------------------
# infer / eval

def _nms_settings(args) -> dict:
    return {"nms": not args.no_nms, "threshold": args.threshold,
            "nms_window": args.nms_window, "nms_decay": args.nms_decay}


def cmd_infer(args) -> None:
    started = time.time()
    ckpt = _require(args.checkpoint, "checkpoint")
    data = _require(args.data, "dataset")
    params = load_checkpoint(ckpt)
    clips = load_dataset(data)[args.split]
    settings = _nms_settings(args)
    dets, _ = detect(params, clips, **settings)
    out = _out_dir(args)
    write_detections(out / "detections.csv", dets)
    _write_manifest(out, args, {"inference": settings, "split": args.split},
                    {"checkpoint": ckpt, "data": data}, ["detections.csv"], started)


def cmd_eval(args) -> None:
    started = time.time()
    settings = _nms_settings(args)
    if args.detections:
        if not args.labels:
            raise CliError("--detections needs --labels")
        dets = read_detections(_require(args.detections, "detections"))
        gts = load_labels(_require(args.labels, "labels"))
        inputs = {"detections": args.detections, "labels": args.labels}
        n_classes = None
    else:
        if not (args.checkpoint and args.data):
            raise CliError("need --checkpoint and --data, or --detections and --labels")
        params = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        clips = load_dataset(_require(args.data, "dataset"))[args.split]
        dets, _ = detect(params, clips, **settings)
        gts = ground_truth(clips)
        inputs = {"checkpoint": args.checkpoint, "data": args.data}
        n_classes = params.config.n_classes
    report = evaluate(dets, gts, args.delta, n_classes=n_classes, nms=settings["nms"])
    out = _out_dir(args)
    write_report(out / "report.json", report)
    _write_manifest(out, args, {"inference": settings, "deltas": list(args.delta)}, inputs,
                    ["report.json"], started)
    for d in sorted(report.results):
        print(f"mAP@{d}\t{report.mAP(d):.6f}")


# ---------------------------------------------------------------------------
# analyze

def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_analyze(args) -> None:
    started = time.time()
    if not (args.log or args.checkpoint or args.report):
        raise CliError("nothing to analyze: give --log, --report or --checkpoint")
    out = _out_dir(args)
    outputs, inputs = [], {}
    if args.log:
        history = TrainLog.read(_require(args.log, "training log"))
        _write_csv(out / "offsets.csv", ["epoch", "offset_noisy", "offset_precise", "loss", "lr"],
                   [(r.epoch, r.offset_noisy, r.offset_precise, r.loss, r.lr) for r in history.records])
        outputs.append("offsets.csv")
        inputs["log"] = args.log
    rows = []
    for path in args.report or []:
        report = read_report(_require(path, "report"))
        rows += [(path, d, report.mAP(d)) for d in sorted(report.results)]
        inputs[f"report:{path}"] = path
    if args.checkpoint:
        if not args.data:
            raise CliError("--checkpoint needs --data")
        params = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        clips = load_dataset(_require(args.data, "dataset"))[args.split]
        dets, scores = detect(params, clips, nms=not args.no_nms)
        gts = ground_truth(clips)
        deltas = list(range(0, args.max_delta + 1))
        report = evaluate(dets, gts, deltas, n_classes=params.config.n_classes)
        rows += [(args.checkpoint, d, report.mAP(d)) for d in deltas]
        gaps = score_gap(scores, gts, args.gap_delta)
        _write_csv(out / "score_gap.csv", ["class", "mean_gap", "samples"],
                   [(k, gap, n) for k, (gap, n) in gaps.items()])
        outputs.append("score_gap.csv")
        inputs.update(checkpoint=args.checkpoint, data=args.data)
    if rows:
        _write_csv(out / "map_vs_delta.csv", ["model", "delta", "mAP"], rows)
        outputs.append("map_vs_delta.csv")
    _write_manifest(out, args, {"max_delta": args.max_delta, "gap_delta": args.gap_delta},
                    inputs, outputs, started)


# ---------------------------------------------------------------------------
# replay

def cmd_replay(args) -> None:
    manifest = json.loads(_require(args.manifest, "manifest").read_text())
    recorded = dict(manifest["args"])
    if args.out:
        recorded["out"] = args.out
    namespace = argparse.Namespace(**recorded)
    namespace.func = COMMANDS[recorded["command"]]
    namespace.func(namespace)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "replay": cmd_replay,
}


def _add_inference_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--no-nms", action="store_true", help="skip soft NMS")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--nms-window", type=int, default=DEFAULT_NMS_WINDOW)
    p.add_argument("--nms-decay", type=float, default=DEFAULT_NMS_DECAY)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynspot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", help=f"output directory (default ${HOME_ENV}/{name} or runs/{name})")
        p.set_defaults(func=COMMANDS[name])
        return p

    g = command("generate", "write a synthetic dataset")
    g.add_argument("--profile", choices=("distinct", "ambiguous"), default="distinct")
    g.add_argument("--sigma", type=float, default=0.0, help="label noise std in frames (train split)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-seed", type=int, default=None)
    g.add_argument("--length", type=int, default=64)
    g.add_argument("--eval-length", type=int, default=128)
    g.add_argument("--n-classes", type=int, default=4)
    g.add_argument("--d-feat", type=int, default=8)
    g.add_argument("--gain", type=float, default=None)
    g.add_argument("--width", type=int, default=None)
    g.add_argument("--n-train", type=int, default=2048)
    g.add_argument("--n-val", type=int, default=16)
    g.add_argument("--n-test", type=int, default=64)

    t = command("train", "train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--matching", choices=("static", "time-only", "dynamic"), default="dynamic")
    t.add_argument("--lambda-time", type=float, default=None,
                   help="time weight (default chosen from the dataset's sigma)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--steps", type=int, default=100, help="steps per epoch")
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--lr-backbone", type=float, default=None)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--warmup", type=int, default=3)
    t.add_argument("--mixup", action="store_true")
    t.add_argument("--dilation", action="store_true")
    t.add_argument("--no-aux", action="store_true", help="loss on the last decoder layer only")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eval-every", type=int, default=0)
    t.add_argument("--delta", type=int, nargs="+", default=[1, 2])
    t.add_argument("--nq", type=int, default=16, help="number of queries")
    t.add_argument("--d-model", type=int, default=32)
    t.add_argument("--d-ff", type=int, default=64)
    t.add_argument("--n-enc", type=int, default=2)
    t.add_argument("--n-dec", type=int, default=2)
    t.add_argument("--heads", type=int, default=2)

    i = command("infer", "write detections for a dataset split")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    _add_inference_flags(i)

    e = command("eval", "mAP report from a model or a detections CSV")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--detections")
    e.add_argument("--labels", help="dataset directory or label file")
    e.add_argument("--delta", type=int, nargs="+", default=[1, 2])
    _add_inference_flags(e)

    a = command("analyze", "CSV series: offsets per epoch, mAP vs delta, score gaps")
    a.add_argument("--log", help="train_log.jsonl")
    a.add_argument("--report", nargs="*", help="report.json files")
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--split", default="test", choices=("train", "val", "test"))
    a.add_argument("--no-nms", action="store_true")
    a.add_argument("--max-delta", type=int, default=5)
    a.add_argument("--gap-delta", type=int, default=1)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="write outputs here instead of the recorded directory")
    r.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except TrainingDiverged as exc:
        print(f"error TrainingDiverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CliError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())

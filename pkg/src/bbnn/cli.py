"""Command-line entry point: ``bbnn {preprocess,inspect,train,cv,evaluate,predict}``.

Summaries go to stdout, progress to stderr, artifacts to files.
Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import frontend
from .evaluation import confusion, cross_validate, make_folds, metrics, write_metrics_csv
from .model import CheckpointError, build, count_params, load_checkpoint, save_checkpoint
from .train import NumericalError, TrainConfig, evaluate_loss, fit, write_epoch_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MAX_SKIP_FRACTION = 0.05

log = logging.getLogger("bbnn")


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _mel_config(args) -> frontend.MelConfig:
    return frontend.MelConfig(target_frames=args.frames, n_mels=args.mels)


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch, max_epochs=args.epochs, lr0=args.lr, seed=args.seed,
                       early_stop_patience=args.patience)


def _load_cache(path) -> frontend.Corpus:
    if path is None:
        raise DataError("no cache given; run `bbnn preprocess --corpus DIR --cache FILE` first")
    if not Path(path).is_file():
        raise DataError(f"cache {path} not found; run `bbnn preprocess --corpus DIR --cache {path}` first")
    try:
        corpus = frontend.read_cache(path)
    except frontend.CacheError as e:
        raise DataError(str(e)) from e
    if len(corpus) == 0:
        raise DataError(f"cache {path} holds no clips")
    return corpus


def _load_model(path, tl_pool):
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found")
    try:
        return load_checkpoint(path, tl_pool=tl_pool)
    except (CheckpointError, KeyError) as e:
        raise DataError(str(e)) from e


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    return out


def _epoch_progress(e):
    print(f"epoch {e.epoch:3d}  train {e.train_loss:.4f}  val {e.val_loss:.4f}  "
          f"acc {100 * e.val_accuracy:5.1f}%  lr {e.lr:g}", file=sys.stderr, flush=True)


def cmd_preprocess(args) -> int:
    root = Path(args.corpus)
    if not root.is_dir():
        raise DataError(f"corpus root {root} is not a directory")
    genres, files = frontend.scan_corpus(root)
    if not genres:
        raise DataError(f"no genres found under {root} (expected {root}/<genre>/*.wav)")
    if len(genres) < 2:
        raise DataError(f"need at least 2 genres, found {genres}")
    print(f"preprocessing {len(files)} clips from {len(genres)} genres", file=sys.stderr)
    corpus, skipped = frontend.preprocess_corpus(root, _mel_config(args))
    frontend.write_cache(args.cache, corpus)
    print(f"{'Genre':<20}Track")
    for g, n in corpus.counts().items():
        print(f"{g:<20}{n}")
    print(f"{'Total':<20}{len(corpus)}")
    if files and len(skipped) / len(files) > MAX_SKIP_FRACTION:
        print(f"{len(skipped)} of {len(files)} clips could not be decoded", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def inspect_lines(n_classes=10, L=3, input_shape=(647, 128), tl_pool="avg") -> list[str]:
    model = build(n_classes, input_shape, L, tl_pool=tl_pool)
    rows, total = count_params(model, "table")
    _, full = count_params(model, "full")
    lines = [f"{'Type':<5}{'Layers':<26}{'Output Size':<14}{'Filter Size/Stride (Number)':<62}Params"]
    for r in rows:
        params = f"{r.params:,}" if r.params is not None else ""
        lines.append(f"{r.stage:<5}{r.layer:<26}{r.output:<14}{r.filters:<62}{params}")
    lines.append(f"Total Params incl. batch-norm {full:,}")
    lines.append(f"Total Params {total:,}")
    return lines


def cmd_inspect(args) -> int:
    print("\n".join(inspect_lines(args.classes, args.blocks, (args.frames, args.mels), args.tl_pool)))
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = _load_cache(args.cache)
    cfg = _train_config(args)
    out = _out_dir(args.out)
    x, y = corpus.as_tensor(), corpus.labels
    plan = make_folds(y, args.folds, args.seed)[0]
    train_idx = np.sort(np.concatenate([plan.train, plan.test]))
    model = build(len(corpus.genres), corpus.shape, args.blocks, seed=args.seed, tl_pool=args.tl_pool)
    model, logs = fit(model, (x[train_idx], y[train_idx]), (x[plan.val], y[plan.val]), cfg, _epoch_progress)
    save_checkpoint(model, out / "model.bbnn")
    write_epoch_csv(out / "epochs.csv", logs)
    best = min(logs, key=lambda e: e.val_loss)
    print(f"trained {len(logs)} epochs; best val loss {best.val_loss:.4f} (epoch {best.epoch}, "
          f"acc {100 * best.val_accuracy:.1f}%)")
    print(f"checkpoint: {out / 'model.bbnn'}")
    return EXIT_OK


def _print_metrics(genres, m):
    print(f"{'Genre':<20}{'Precision (%)':>14}{'Recall (%)':>12}{'F-score (%)':>13}")
    for g, p, r, f in zip(genres, m.precision, m.recall, m.f_score):
        print(f"{g:<20}{p:>14.1f}{r:>12.1f}{f:>13.1f}")
    avg = m.averages()
    print(f"{'Average':<20}{avg['precision']:>14.1f}{avg['recall']:>12.1f}{avg['f_score']:>13.1f}")


def cmd_cv(args) -> int:
    corpus = _load_cache(args.cache)
    cfg = _train_config(args)
    out = _out_dir(args.out)
    n_classes = len(corpus.genres)

    def builder(seed):
        return build(n_classes, corpus.shape, args.blocks, seed=seed, tl_pool=args.tl_pool)

    def progress(fold, acc):
        print(f"fold {fold}: test accuracy {acc:.1f}%", file=sys.stderr, flush=True)

    report = cross_validate(corpus.as_tensor(), corpus.labels, builder, cfg, args.folds, args.seed,
                            corpus.genres, progress=progress)
    report.write_json(out / "cv_report.json")
    report.write_csv(out / "cv_report.csv")
    for i, logs in enumerate(report.logs):
        write_epoch_csv(out / f"fold{i}_epochs.csv", logs)
    _print_metrics(report.genres, report.pooled)
    print(f"mean accuracy over {len(report.fold_accuracy)} folds: {report.mean_accuracy:.1f}%")
    print(f"pooled accuracy: {report.pooled.accuracy:.1f}%")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    corpus = _load_cache(args.cache)
    model = _load_model(args.checkpoint, args.tl_pool)
    if model.n_classes != len(corpus.genres):
        raise DataError(f"checkpoint has {model.n_classes} classes but cache has {len(corpus.genres)}")
    _, _, preds = evaluate_loss(model, corpus.as_tensor(), corpus.labels, args.batch)
    cm = confusion(preds, corpus.labels, model.n_classes)
    m = metrics(cm)
    _print_metrics(corpus.genres, m)
    print(f"accuracy: {m.accuracy:.1f}%")
    if args.out:
        write_metrics_csv(_out_dir(args.out) / "eval_report.csv", corpus.genres, m)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint, args.tl_pool)
    if args.genres:
        genres = args.genres.split(",")
    elif args.cache:
        genres = _load_cache(args.cache).genres
    else:
        genres = [f"class{i}" for i in range(model.n_classes)]
    if len(genres) != model.n_classes:
        raise DataError(f"checkpoint has {model.n_classes} classes but {len(genres)} genre names were given")
    try:
        mel = frontend.logmel_from_file(args.audio, _mel_config(args))
    except (frontend.WavError, OSError) as e:
        raise DataError(str(e)) from e
    probs = model.forward(mel.frames[None, :, :, None])[0]
    for i in np.argsort(-probs, kind="stable"):
        print(f"{genres[i]:<20}{probs[i]:.6f}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bbnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def mel_flags(sp):
        sp.add_argument("--frames", type=int, default=647, help="time frames per clip")
        sp.add_argument("--mels", type=int, default=128, help="mel bands")

    def model_flags(sp):
        sp.add_argument("--blocks", type=int, default=3, help="Inception blocks L")
        sp.add_argument("--tl-pool", choices=["avg", "max"], default="avg")

    def train_flags(sp):
        sp.add_argument("--cache", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--epochs", type=int, default=100)
        sp.add_argument("--batch", type=int, default=8)
        sp.add_argument("--lr", type=float, default=0.01)
        sp.add_argument("--patience", type=int, default=10, help="early-stop patience in epochs")
        sp.add_argument("--folds", type=int, default=10)
        model_flags(sp)

    sp = sub.add_parser("preprocess", help="decode a corpus into a MELC feature cache")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--cache", required=True)
    mel_flags(sp)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("inspect", help="print the layer table and parameter counts")
    sp.add_argument("--classes", type=int, default=10)
    mel_flags(sp)
    model_flags(sp)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("train", help="train one model on a cache")
    train_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("cv", help="k-fold cross-validation on a cache")
    train_flags(sp)
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("evaluate", help="metrics of a checkpoint on a held-out cache")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cache", required=True)
    sp.add_argument("--out")
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--tl-pool", choices=["avg", "max"], default="avg")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="genre distribution for one WAV file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--audio", required=True)
    sp.add_argument("--cache", help="cache whose genre names label the output")
    sp.add_argument("--genres", help="comma-separated genre names")
    sp.add_argument("--tl-pool", choices=["avg", "max"], default="avg")
    mel_flags(sp)
    sp.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

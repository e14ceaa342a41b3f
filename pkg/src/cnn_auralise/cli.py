"""Command-line entry point: ``cnn-auralise <subcommand> [options]``.

Options may also come from a plain ``key = value`` file given with
``--config``; flags on the command line win.  Every run writes its resolved
options to ``run_config.txt`` in the output directory.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("cnn_auralise")

MODEL_FILE = "model.json"
SIDECAR = "run_config.txt"


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config file and option parsing
# ---------------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def parse_feature(text: str) -> tuple[int, int]:
    """``"3-38"`` -> (3, 38): 1-based layer, 0-based feature."""
    layer, sep, feat = text.partition("-")
    try:
        if not sep:
            raise ValueError
        return int(layer), int(feat)
    except ValueError:
        raise argparse.ArgumentTypeError(f"feature must look like LAYER-INDEX, e.g. 3-38, got {text!r}") from None


def parse_keep(text: str):
    if text == "all":
        return "all"
    try:
        k = int(text)
    except ValueError:
        k = 0
    if k < 1:
        raise argparse.ArgumentTypeError(f"keep must be 'all' or a positive integer, got {text!r}")
    return k


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file supplying option defaults")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="maximum worker threads")
    p.add_argument("--sample-rate", type=int, default=11025)
    p.add_argument("--n-fft", type=int, default=512)
    p.add_argument("--hop", type=int, default=256)
    p.add_argument("-v", "--verbose", action="store_true")


def _requests_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", type=Path, required=True, help="model manifest (.json)")
    p.add_argument("--wav", type=Path, required=True, help="16-bit PCM input")
    p.add_argument("--feature", type=parse_feature, action="append", default=[],
                   help="LAYER-INDEX, repeatable (e.g. --feature 3-38)")
    p.add_argument("--layer-all", type=int, help="request every feature of this layer")
    p.add_argument("--keep", type=parse_keep, default="all", help="'all' or the k strongest activations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnn-auralise", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-dataset", help="write a labelled synthetic genre dataset")
    _common(p)
    p.add_argument("--clips-per-class", type=int, default=50)
    p.add_argument("--clip-seconds", type=float, default=4.0)
    p.add_argument("--name", default="dataset.npz")

    p = sub.add_parser("train", help="train the CNN and save model plus metrics")
    _common(p)
    p.add_argument("--dataset", type=Path, help="training .npz (default: synthesise 50 clips/class)")
    p.add_argument("--validation", type=Path, help="validation .npz (default: synthesise 20 clips/class)")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--target-val-acc", type=float, help="stop once validation accuracy reaches this")
    p.add_argument("--keep-best", action="store_true", help="return the best-validation epoch")

    p = sub.add_parser("eval", help="print accuracy and confusion matrix")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)

    p = sub.add_parser("model-signals", help="write the 224-signal corpus and manifest")
    _common(p)

    p = sub.add_parser("deconv", help="write deconvolved maps for requested features")
    _common(p)
    _requests_args(p)
    p.add_argument("--format", choices=("binary", "csv"), default="binary")

    p = sub.add_parser("auralize", help="write WAVs of deconvolved features")
    _common(p)
    _requests_args(p)
    p.add_argument("--rectify", action="store_true", help="clamp negative map values to zero")

    p = sub.add_parser("correlate", help="per-layer correlation study over the model-signal corpus")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--corpus", type=Path, help="directory from model-signals (default: synthesise in memory)")
    p.add_argument("--layers", type=int, nargs="+", help="restrict to these layers")

    p = sub.add_parser("rf-table", help="print the effective receptive-field table")
    _common(p)
    p.add_argument("--exact", action="store_true", help="use unrounded frame durations")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    config = read_config(args.config)
    # sidecars record the subcommand; accept it when it agrees
    recorded = config.pop("command", args.command)
    if recorded != args.command:
        raise UsageError(f"{args.config}: written for '{recorded}', not '{args.command}'")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(config) - known - {"config"})
    if unknown:
        raise UsageError(f"{args.config}: unknown option(s) for {args.command}: {', '.join(unknown)}")
    defaults = {}
    for action in sub._actions:
        if action.dest not in config:
            continue
        raw = config[action.dest]
        convert = action.type or str
        try:
            if action.nargs in ("+", "*"):
                defaults[action.dest] = [convert(v) for v in raw.split()]
            elif action.const is True:  # store_true
                defaults[action.dest] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(action, argparse._AppendAction):
                defaults[action.dest] = [convert(v) for v in raw.replace(",", " ").split()]
            else:
                defaults[action.dest] = convert(raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{args.config}: bad value for {action.dest}: {exc}") from None
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def write_sidecar(args: argparse.Namespace, out_dir: Path) -> Path:
    path = out_dir / SIDECAR
    lines = []
    for key, value in sorted(vars(args).items()):
        if key == "config" or value is None:
            continue
        if isinstance(value, list):
            value = " ".join(f"{v[0]}-{v[1]}" if isinstance(v, tuple) else str(v) for v in value)
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _prepared(dataset):
    from .nn import prepare_input

    return np.stack([prepare_input(m) for m in dataset.spectrograms])[:, None], dataset.labels


def _genre_spec(args, clips, seed):
    from .synth import GenreDatasetSpec

    return GenreDatasetSpec(clips_per_class=clips, clip_seconds=getattr(args, "clip_seconds", 4.0),
                            seed=seed, sample_rate=args.sample_rate, n_fft=args.n_fft, hop=args.hop)


def cmd_synth_dataset(args) -> None:
    from .synth import generate_genre_dataset

    ds = generate_genre_dataset(_genre_spec(args, args.clips_per_class, args.seed))
    path = args.out / args.name
    ds.save(path)
    print(f"wrote {len(ds)} clips to {path}")


def cmd_train(args) -> None:
    from .nn import TrainConfig, build_model, save_model, train
    from .synth import LabeledDataset, generate_genre_dataset

    train_ds = LabeledDataset.load(args.dataset) if args.dataset else generate_genre_dataset(_genre_spec(args, 50, args.seed))
    val_ds = (
        LabeledDataset.load(args.validation)
        if args.validation
        else generate_genre_dataset(_genre_spec(args, 20, args.seed + 1))
    )
    x, y = _prepared(train_ds)
    model = build_model(input_shape=x.shape[1:], class_names=tuple(train_ds.class_names), seed=args.seed)
    hyper = TrainConfig(args.lr, args.momentum, args.batch, args.epochs, args.seed,
                        target_val_acc=args.target_val_acc, keep_best=args.keep_best)
    model, history = train(model, (x, y), hyper, validation=_prepared(val_ds))
    save_model(model, args.out / MODEL_FILE)
    with open(args.out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)
    last = history[-1]
    print(f"trained {len(history)} epochs, val_acc {last.get('val_acc', float('nan')):.3f}; model in {args.out / MODEL_FILE}")


def cmd_eval(args) -> None:
    from .nn import load_model, predict
    from .synth import LabeledDataset

    model = load_model(args.model)
    x, y = _prepared(LabeledDataset.load(args.dataset))
    pred = predict(model, x).argmax(axis=1)
    n = len(model.class_names)
    confusion = np.zeros((n, n), dtype=int)
    np.add.at(confusion, (y, pred), 1)
    print(f"accuracy {np.mean(pred == y):.4f} on {len(y)} clips")
    width = max(len(c) for c in model.class_names)
    print(" " * width + "  " + "  ".join(f"{c:>{width}}" for c in model.class_names))
    for name, row in zip(model.class_names, confusion):
        print(f"{name:>{width}}  " + "  ".join(f"{v:>{width}}" for v in row))


def cmd_model_signals(args) -> None:
    from .synth import write_corpus

    paths = write_corpus(args.out, args.sample_rate)
    print(f"wrote {len(paths)} model signals and manifest.csv to {args.out}")


def _requests(args, model):
    from .deconv import DeconvRequest

    pairs = list(args.feature)
    if args.layer_all is not None:
        if not 1 <= args.layer_all <= len(model.conv_layers):
            raise UsageError(f"--layer-all must be in 1..{len(model.conv_layers)}")
        pairs += [(args.layer_all, f) for f in range(model.conv_layers[args.layer_all - 1].out_ch)]
    if not pairs:
        raise UsageError("no features requested (use --feature L-F or --layer-all L)")
    return [DeconvRequest(l, f, args.keep) for l, f in pairs]


def cmd_deconv(args) -> None:
    from .deconv import InvalidRequest, deconv_feature, write_map_binary, write_map_csv
    from .dsp import read_wav, stft
    from .nn import forward, load_model, prepare_input

    model = load_model(args.model)
    spec = stft(read_wav(args.wav), args.n_fft, args.hop)
    trace = forward(model, prepare_input(spec.magnitude, model.dtype)[None])
    failures = []
    for req in _requests(args, model):
        try:
            dmap = deconv_feature(model, trace, req)
        except InvalidRequest as exc:
            failures.append(f"{req.label}: {exc}")
            continue
        if args.format == "binary":
            write_map_binary(args.out / f"{req.label}.dmap", dmap.values)
        else:
            write_map_csv(args.out / f"{req.label}.csv", dmap.values)
    if failures:
        raise RuntimeError("; ".join(failures))
    print(f"wrote maps to {args.out}")


def cmd_auralize(args) -> None:
    from .auralize import auralise_pipeline
    from .nn import load_model

    requests = _requests(args, load_model(args.model))
    results = auralise_pipeline(args.model, args.wav, requests, args.out, rectify=args.rectify,
                                jobs=args.jobs, n_fft=args.n_fft, hop=args.hop)
    print(f"wrote {len(results)} auralisations to {args.out}")


def cmd_correlate(args) -> None:
    from .analysis import correlation_study, emit_report, trend_summary
    from .dsp import read_wav
    from .nn import load_model
    from .synth import corpus, read_corpus_manifest

    model = load_model(args.model)
    if args.corpus:
        signals = [(spec, read_wav(path)) for spec, path in read_corpus_manifest(args.corpus)]
    else:
        signals = list(corpus(args.sample_rate))
    report = correlation_study(model, signals, layers=args.layers, jobs=args.jobs, n_fft=args.n_fft, hop=args.hop)
    emit_report(report, args.out)
    for r in report.rows:
        print(f"layer {r.layer} {r.attribute:<10} mean {r.mean:+.4f} std {r.std:.4f} pairs {r.n_pairs} skipped {r.n_skipped}")
    for line in trend_summary(report):
        print(f"trend (informational): {line}")


def cmd_rf_table(args) -> None:
    from .analysis import format_rf_table, rf_table, write_rf_table

    entries = rf_table(n_fft=args.n_fft, hop=args.hop, sr=args.sample_rate, ms_precision=None if args.exact else 0.1)
    print(format_rf_table(entries))
    write_rf_table(entries, args.out / "rf_table.csv")


COMMANDS = {
    "synth-dataset": cmd_synth_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "model-signals": cmd_model_signals,
    "deconv": cmd_deconv,
    "auralize": cmd_auralize,
    "correlate": cmd_correlate,
    "rf-table": cmd_rf_table,
}


def main(argv=None) -> int:
    """Run one subcommand; returns 0 on success, 2 on usage errors, 1 otherwise."""
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"cnn-auralise: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    start = time.perf_counter()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        write_sidecar(args, args.out)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cnn-auralise: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one-line cause, nonzero exit
        log.debug("failure", exc_info=True)
        print(f"cnn-auralise: error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 1
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())

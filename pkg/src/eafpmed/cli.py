"""Command-line entry point: ``eafpmed <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 training
divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import explain as xp
from . import harness
from .checkpoint import CheckpointError
from .data import DatasetError, SYNTH_CATEGORIES, synth_fixture, write_dataset
from .eafp import FingerprintMismatch, UnknownPromptError
from .metrics import ConfusionMatrix, MetricReport
from .model import EAFP_OFF, EAFP_ON, ClassifierModel, predict
from .netpbm import FormatError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _run_flags(p: argparse.ArgumentParser, freeze: bool = False) -> None:
    p.add_argument("--data", help="dataset root (folder per category); synthetic fixture if omitted")
    p.add_argument("--config", help="run-config JSON; command-line flags take precedence")
    p.add_argument("--prompt", help="prompt key or alias selecting the EAFP parameter set")
    p.add_argument("--pool", help="parameter-pool index JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--image-size", type=int, dest="image_size")
    if freeze:
        p.add_argument("--freeze-eafp", nargs="?", const=True, type=_bool, dest="freeze_eafp",
                       metavar="BOOL", help="keep EAFP parameters fixed (default true)")
        p.add_argument("--mode", choices=(EAFP_ON, EAFP_OFF))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eafpmed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="write a synthetic lesion dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-category", type=int, default=40, dest="per_category")
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("pretrain", help="pretrain EAFP parameters and register them in a pool")
    _run_flags(p)
    p.add_argument("--alias", action="append", default=None, dest="aliases",
                   help="additional prompt text resolving to this key (repeatable)")

    p = sub.add_parser("train", help="train the composed classifier")
    _run_flags(p, freeze=True)

    p = sub.add_parser("eval", help="evaluate a trained model on its test split")
    p.add_argument("--model", required=True, help="model directory (holds model.json)")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--emit-roc", action="store_true", dest="emit_roc")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")

    p = sub.add_parser("explain", help="write attention heatmaps for test images")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("gradcam++", "gb", "camgb"), default="gradcam++")
    p.add_argument("--layer", help="target layer for Grad-CAM++ (default: last feature layer)")
    p.add_argument("--limit", type=int, default=None, help="explain at most this many images")

    p = sub.add_parser("metrics", help="report metrics for a confusion-matrix CSV")
    p.add_argument("--in", required=True, dest="input")
    p.add_argument("--out", help="directory for report.json and report.csv (stdout if omitted)")
    return parser


# --------------------------------------------------------------------------


def _run_config(args, **fixed) -> harness.RunConfig:
    names = ("data", "prompt", "pool", "seed", "out", "epochs", "batch_size", "lr", "optimizer",
             "image_size", "freeze_eafp", "mode", "aliases")
    flags = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
    flags.update(fixed)
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    try:
        return harness.RunConfig.from_mapping(doc, **flags)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _log(stream):
    def progress(rec: harness.EpochRecord) -> None:
        print(f"epoch {rec.epoch + 1}: train loss {rec.train_loss:.4f} acc {rec.train_accuracy:.4f} "
              f"| test loss {rec.test_loss:.4f} acc {rec.test_accuracy:.4f}", file=stream, flush=True)
    return progress


def cmd_synth(args, stdout) -> int:
    samples = synth_fixture(args.classes, args.per_category, args.size, args.seed)
    write_dataset(samples, args.out, SYNTH_CATEGORIES)
    harness.write_manifest(args.out)
    print(f"wrote {len(samples)} images to {args.out}", file=stdout)
    return EXIT_OK


def cmd_pretrain(args, stdout) -> int:
    config = _run_config(args)
    if not config.prompt:
        raise UsageError("pretrain needs --prompt")
    if not config.pool:
        raise UsageError("pretrain needs --pool")
    result = harness.pretrain(config, progress=_log(sys.stderr))
    print(f"registered {result.key!r} in {config.pool}; final test accuracy "
          f"{result.records[-1].test_accuracy:.4f}", file=stdout)
    return EXIT_OK


def cmd_train(args, stdout) -> int:
    config = _run_config(args)
    if config.mode == EAFP_ON and not config.prompt:
        raise UsageError("eafp-on training needs --prompt (or --mode eafp-off)")
    if config.mode == EAFP_ON and not config.pool:
        raise UsageError("eafp-on training needs --pool")
    if not config.out:
        raise UsageError("train needs --out")
    result = harness.train(config, progress=_log(sys.stderr))
    best = result.records[result.best_epoch]
    print(f"best test accuracy {best.test_accuracy:.4f} at epoch {best.epoch + 1}; "
          f"final {result.records[-1].test_accuracy:.4f}", file=stdout)
    return EXIT_OK


def _model_and_split(args):
    model_dir = Path(args.model)
    if not (model_dir / "model.json").exists():
        raise FileNotFoundError(f"{model_dir / 'model.json'} not found")
    model = ClassifierModel.load(model_dir)
    meta = json.loads((model_dir / "model.json").read_text())
    doc = {}
    for candidate in ([Path(args.config)] if args.config else []) + [model_dir.parent / "config.json"]:
        if candidate.exists():
            doc = json.loads(candidate.read_text())
            break
    doc.setdefault("seed", 0)
    for key in ("out", "pool", "prompt"):
        doc.pop(key, None)
    if args.data:
        doc["data"] = args.data
        doc.pop("synth", None)
    config = harness.RunConfig.from_mapping(doc, mode=model.mode)
    train_set, test_set, categories = harness.split_dataset(config)
    chosen = {"test": test_set, "train": train_set, "all": train_set + test_set}[getattr(args, "split", "test")]
    return model, chosen, meta.get("categories") or categories


def cmd_eval(args, stdout) -> int:
    model, samples, categories = _model_and_split(args)
    ev = harness.evaluate(model, samples, categories, args.out, emit_roc=args.emit_roc)
    overall = ev.report.rendered()["overall_percent"]
    print(json.dumps(overall), file=stdout)
    return EXIT_OK


def cmd_explain(args, stdout) -> int:
    model, samples, categories = _model_and_split(args)
    if args.limit is not None:
        samples = samples[: args.limit]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        pred, _ = predict(model, s.image[None])
        k = int(pred[0])
        entry = {"index": i, "source": s.source, "label": s.label, "predicted": k}
        stem = f"{i:04d}"
        if args.method in ("gradcam++", "camgb"):
            cam = xp.grad_campp(model, s.image, k, args.layer)
            entry["layer"] = cam.layer
            if s.box is not None:
                entry["argmax_in_box"] = xp.argmax_in_box(cam.heatmap, s.box)
        if args.method == "gradcam++":
            xp.write_heatmap(out / f"{stem}_gradcampp.ppm", cam.heatmap, s.image)
        else:
            gb = xp.guided_backprop(model, s.image, k)
            if args.method == "gb":
                xp.write_gray(out / f"{stem}_gb.pgm", xp.gb_gray(gb))
            else:
                xp.write_heatmap(out / f"{stem}_camgb.ppm", xp.cam_gb(cam, gb))
        entries.append(entry)
    summary = {"method": args.method, "images": entries}
    hits = [e["argmax_in_box"] for e in entries if "argmax_in_box" in e and e["label"] == e["predicted"]]
    if hits:
        summary["box_hit_rate_correct"] = sum(hits) / len(hits)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    harness.write_manifest(out)
    print(f"wrote {len(entries)} {args.method} maps to {out}", file=stdout)
    return EXIT_OK


def cmd_metrics(args, stdout) -> int:
    cm = ConfusionMatrix.from_csv(Path(args.input).read_text())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = MetricReport.from_confusion(cm)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "report.csv").write_text(report.to_csv())
    else:
        stdout.write(report.to_json())
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "explain": cmd_explain, "metrics": cmd_metrics}


def main(argv: list[str] | None = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, stdout)
    except (UsageError, UnknownPromptError) as exc:
        print(f"eafpmed {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except harness.TrainingDiverged as exc:
        print(f"eafpmed {args.command}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, FormatError, CheckpointError, FingerprintMismatch, FileNotFoundError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"eafpmed {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

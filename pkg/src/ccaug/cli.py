"""Command-line entry point: train, eval, sweep, export-history."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import MODELS, PRESETS, ExperimentConfig, expand, load_config_file
from .data import ImageSet, cached_dataset
from .diffaug import TransformKind
from .head import AugMatrix
from .network import init_weights, predict_logp
from .probes import (accuracy_report, brightness_sweep, orientation_accuracy_sweep, orientation_sweep,
                     write_history_csv)
from .streams import stream
from .trainer import train

log = logging.getLogger("ccaug")

CHECKPOINT_NAME = "checkpoint.ckpt"


def make_head(cfg: ExperimentConfig) -> AugMatrix:
    columns = cfg.network.num_classes if cfg.model == "cc" else 1
    return AugMatrix.create(cfg.spec, columns, dict(cfg.theta_init))


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_train(cfg: ExperimentConfig, cache_dir=None) -> dict[str, Path]:
    """Train per ``cfg``; writes checkpoint, width history CSV, step log and expanded config."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    ds = cached_dataset(cfg.dataset, cfg.data_root, cache_dir)
    if ds.images.shape[1:] != (cfg.network.in_channels, cfg.network.image_size, cfg.network.image_size):
        raise ValueError(f"dataset images {ds.images.shape[1:]} do not match the network config")
    weights = init_weights(cfg.network, stream(cfg.train.seed, "init"))
    head = make_head(cfg)
    steps = []
    ck = train(cfg.train, ds, head, weights, cfg.network, {**cfg.to_dict(), "class_names": ds.class_names},
               on_step=steps.append)
    paths = {"checkpoint": out / CHECKPOINT_NAME, "history": out / "history.csv",
             "log": out / "train_log.csv", "config": out / "config.json"}
    ckpt_io.save(ck, paths["checkpoint"])
    write_history_csv(paths["history"], ck.history, ck.spec, ds.class_names)
    with open(paths["log"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss", "nll", "penalty"])
        for s in steps:
            w.writerow([s.epoch, s.step, repr(s.loss), repr(s.nll), repr(s.penalty)])
    return paths


def _checkpoint_config(ck: ckpt_io.Checkpoint) -> ExperimentConfig:
    return ExperimentConfig.from_dict(ck.config)


def _test_set(cfg: ExperimentConfig, ck: ckpt_io.Checkpoint, data_root=None, test_subset=None,
              cache_dir=None) -> ImageSet:
    spec = cfg.dataset.with_split("test", cfg.test_seed, test_subset or cfg.test_subset)
    ds = cached_dataset(spec, data_root or cfg.data_root, cache_dir)
    net = ck.network
    if ds.images.shape[1:] != (net.in_channels, net.image_size, net.image_size) or ds.num_classes != net.num_classes:
        raise ValueError("checkpoint and test dataset do not match")
    return ds


def run_eval(checkpoint_path, data_root=None, out=None, test_subset=None, cache_dir=None) -> dict:
    """Accuracy (overall and per class) on the matched corrupted test split."""
    ck = ckpt_io.load(checkpoint_path)
    cfg = _checkpoint_config(ck)
    test = _test_set(cfg, ck, data_root, test_subset, cache_dir)
    weights, head = ck.tensors(), ck.head()
    report = accuracy_report(weights, head, test, cfg.train.n_test_copies, ck.seed)
    single = predict_logp(test.images, weights)
    report["single_forward_accuracy"] = float((single.argmax(axis=1) == test.labels).mean())
    report["model"] = cfg.model
    report["test_seed"] = cfg.test_seed
    report["n_copies"] = cfg.train.n_test_copies
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        _write_json(Path(out) / "eval.json", report)
    return report


def run_sweep(checkpoint_path, kind: str, target=None, data_root=None, out_csv=None, image_index=None,
              accuracy: bool = False, test_subset=None, cache_dir=None):
    """Orientation or brightness sweep on the matched test split; optionally writes CSV."""
    ck = ckpt_io.load(checkpoint_path)
    cfg = _checkpoint_config(ck)
    needed = {"orientation": TransformKind.ROTATION, "brightness": TransformKind.BRIGHTNESS}
    if kind not in needed:
        raise ValueError(f"unknown sweep kind {kind!r}")
    if needed[kind] not in ck.spec.kinds:
        raise ValueError(f"{kind} sweep needs a checkpoint trained with {needed[kind].value} widths")
    test = _test_set(cfg, ck, data_root, test_subset, cache_dir)
    weights, head = ck.tensors(), ck.head()
    copies = cfg.train.n_test_copies
    if kind == "brightness":
        result = brightness_sweep(weights, head, test, n_copies=copies, seed=ck.seed, model=cfg.model)
    else:
        if target is None:
            raise ValueError("orientation sweeps need a target class")
        k = test.class_index(int(target) if str(target).isdigit() and target not in test.class_names else target)
        members = test.of_class(k)
        if accuracy:
            result = orientation_accuracy_sweep(weights, head, members, n_copies=copies, seed=ck.seed,
                                                model=cfg.model, class_filter=test.class_names[k])
        else:
            i = 0 if image_index is None else int(image_index)
            result = orientation_sweep(weights, head, members.images[i], k, n_copies=copies, seed=ck.seed,
                                       model=cfg.model)
            result.class_filter = test.class_names[k]
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        result.to_csv(out_csv)
    return result


def run_export_history(checkpoint_path, out_csv) -> None:
    ck = ckpt_io.load(checkpoint_path)
    names = ck.config.get("class_names") if ck.theta.shape[1] > 1 else ["all"]
    write_history_csv(out_csv, ck.history, ck.spec, names)


# ---------------------------------------------------------------------------


def _config_from_args(args) -> ExperimentConfig:
    raw = load_config_file(args.config) if args.config else {}
    if args.preset:
        raw["preset"] = args.preset
    for key, val in (("data_root", args.data_root), ("out", args.out), ("model", args.model)):
        if val is not None:
            raw[key] = val
    train_over = {"seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size}
    raw["train"] = {**raw.get("train", {}), **{k: v for k, v in train_over.items() if v is not None}}
    if args.subset is not None:
        raw["dataset"] = {**raw.get("dataset", {}), "subset": args.subset}
    if args.test_subset is not None:
        raw["test_subset"] = args.test_subset
    if args.theta_init is not None:
        raw["theta_init"] = {k: float(v) for k, v in (p.split("=") for p in args.theta_init.split(","))}
    if args.channels is not None:
        raw["network"] = {**raw.get("network", {}), "channels": [int(c) for c in args.channels.split(",")]}
    return expand(raw)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccaug", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model and write checkpoint + width history")
    tr.add_argument("--config", help="JSON config file")
    tr.add_argument("--preset", choices=PRESETS)
    tr.add_argument("--data-root")
    tr.add_argument("--out")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--model", choices=MODELS)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--subset", type=int, help="use only the first N training images")
    tr.add_argument("--test-subset", type=int, help="use only the first N test images when evaluating")
    tr.add_argument("--channels", help="comma-separated channel plan for the five conv layers")
    tr.add_argument("--theta-init", help="raw initial widths, e.g. rotation=0.1,brightness=0")
    tr.add_argument("--cache-dir")

    ev = sub.add_parser("eval", help="accuracy on the matched corrupted test split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data-root")
    ev.add_argument("--out")
    ev.add_argument("--test-subset", type=int)
    ev.add_argument("--cache-dir")

    sw = sub.add_parser("sweep", help="orientation or brightness invariance sweep")
    sw.add_argument("--checkpoint", required=True)
    sw.add_argument("--kind", choices=("orientation", "brightness"), required=True)
    sw.add_argument("--target", help="class name or index (orientation sweeps)")
    sw.add_argument("--image-index", type=int, help="which test image of the target class (default 0)")
    sw.add_argument("--accuracy", action="store_true", help="accuracy over all target-class test images")
    sw.add_argument("--data-root")
    sw.add_argument("--out", required=True, help="CSV path")
    sw.add_argument("--test-subset", type=int)
    sw.add_argument("--cache-dir")

    ex = sub.add_parser("export-history", help="write the per-epoch width history CSV")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "train":
            cfg = _config_from_args(args)
            paths = run_train(cfg, args.cache_dir)
            print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
        elif args.command == "eval":
            report = run_eval(args.checkpoint, args.data_root, args.out, args.test_subset, args.cache_dir)
            print(json.dumps(report, indent=2, sort_keys=True))
        elif args.command == "sweep":
            run_sweep(args.checkpoint, args.kind, args.target, args.data_root, args.out, args.image_index,
                      args.accuracy, args.test_subset, args.cache_dir)
            print(args.out)
        elif args.command == "export-history":
            run_export_history(args.checkpoint, args.out)
            print(args.out)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"ccaug: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

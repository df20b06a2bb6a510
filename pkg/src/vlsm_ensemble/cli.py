"""Command-line entry points.

    vlsme train <config.json> [--out-dir DIR] [--seed N]
    vlsme eval <checkpoint> <manifest> <outdir> [--split test] [--overlays]
    vlsme report [metrics.csv ...] [--fixtures [table.json]] [--overlays] [--out-dir DIR]
    vlsme make-toy-data <outdir>

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .data import ManifestError, load_manifest, make_sample
from .ensemble import CheckpointError, EnsembleConfig, build_model, load_checkpoint
from .errors import ConfigurationError
from .losses import read_metrics_csv, write_metrics_csv
from .report import (DuplicateModelError, IncompletePromptGrid, MetricsRecord, evaluate, load_fixture,
                     render_overlay, render_table)
from .trainer import TrainConfig, TrainingAborted, train

log = logging.getLogger("vlsme")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
RUN_KEYS = {"model", "train", "manifest", "output_dir", "seed"}


class RunConfigError(Exception):
    pass


@dataclass
class RunConfig:
    model: EnsembleConfig
    train: TrainConfig
    manifest: Path
    output_dir: Path
    seed: int = 0

    def lock(self) -> dict:
        return {
            "manifest": str(self.manifest),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
        }


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def parse_run_config(data: Mapping[str, Any], base: Path, text: str = "", source: str = "<config>",
                     overrides: Mapping[str, Any] | None = None) -> RunConfig:
    def fail(key: str, msg: str):
        raise RunConfigError(f"{source}:{_line_of(text, key)}: {msg}")

    if not isinstance(data, Mapping):
        raise RunConfigError(f"{source}:1: run config must be a JSON object")
    unknown = set(data) - RUN_KEYS
    if unknown:
        k = sorted(unknown)[0]
        fail(k, f"unknown key {k!r}")
    data = {**data, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    for k in ("model", "manifest", "output_dir"):
        if k not in data:
            raise RunConfigError(f"{source}:1: missing required key {k!r}")

    try:
        seed = int(data.get("seed", 0))
    except (TypeError, ValueError):
        fail("seed", "seed must be an integer")
    try:
        model = EnsembleConfig.from_dict(data["model"])
    except (ConfigurationError, TypeError) as e:
        key = next((k for k in ("variant", "backbones", "unet", "adapter", "image_size") if k in str(e)), "model")
        fail(key, f"invalid model config: {e}")
    train_data = dict(data.get("train", {}) or {})
    train_data["seed"] = seed
    try:
        unknown = set(train_data) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown field(s) {sorted(unknown)}")
        tc = TrainConfig(**train_data)
    except (ConfigurationError, TypeError, ValueError) as e:
        fail("train", f"invalid train config: {e}")

    manifest = (base / str(data["manifest"])).resolve()
    if not manifest.is_file():
        fail("manifest", f"manifest {manifest} does not exist")
    output_dir = (base / str(data["output_dir"])).resolve()
    return RunConfig(model=model, train=tc, manifest=manifest, output_dir=output_dir, seed=seed)


def load_run_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise RunConfigError(f"{path}: cannot read config: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise RunConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
    return parse_run_config(data, path.parent, text, str(path), overrides)


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    try:
        run = load_run_config(args.config, {"output_dir": args.out_dir, "seed": args.seed})
        manifest = load_manifest(run.manifest)
    except (RunConfigError, ManifestError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    run.output_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run.output_dir / "config.lock.json", run.lock())
    try:
        model = build_model(run.model, seed=run.seed)
    except ConfigurationError as e:
        log.error("%s", e)
        return EXIT_USAGE
    try:
        result = train(model, manifest, run.train, run.output_dir)
    except (TrainingAborted, OSError) as e:
        log.error("training aborted: %s", e)
        return EXIT_RUNTIME
    log.info("best epoch %d, val dice %.5f -> %s", result.best_epoch, result.best_val_dice, result.best_checkpoint)
    return EXIT_OK


def _save_predictions(path: Path, preds: dict[tuple[str, int], np.ndarray]) -> None:
    keys = list(preds)
    shape = next(iter(preds.values())).shape
    np.savez_compressed(
        path,
        image_ids=np.array([k[0] for k in keys]),
        prompt_ids=np.array([k[1] for k in keys]),
        shape=np.array(shape),
        bits=np.stack([np.packbits(preds[k].reshape(-1)) for k in keys]),
    )


def _load_predictions(path: Path) -> dict[tuple[str, int], np.ndarray]:
    with np.load(path) as z:
        shape = tuple(z["shape"])
        n = int(np.prod(shape))
        return {
            (str(i), int(p)): np.unpackbits(b)[:n].reshape(shape)
            for i, p, b in zip(z["image_ids"], z["prompt_ids"], z["bits"])
        }


def _write_overlays(manifest, preds, out: Path, size: int) -> int:
    for (image_id, prompt_id), pred in preds.items():
        s = make_sample(manifest, image_id, prompt_id, size)
        render_overlay(s.image, s.mask, pred, out / f"{image_id}_{prompt_id}.png")
    return len(preds)


def cmd_eval(args) -> int:
    try:
        model, extra = load_checkpoint(args.checkpoint)
        manifest = load_manifest(args.manifest)
    except (CheckpointError, ManifestError, ConfigurationError, FileNotFoundError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    if args.variant and args.variant != model.config.variant:
        log.error("checkpoint holds variant %s, not %s", model.config.variant, args.variant)
        return EXIT_USAGE
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    preds: dict[tuple[str, int], np.ndarray] = {}
    try:
        record = evaluate(model, manifest, args.split, args.batch_size, model_name=args.model_name,
                          on_prediction=lambda i, p, m: preds.__setitem__((i, p), m))
    except (ValueError, OSError) as e:
        log.error("evaluation failed: %s", e)
        return EXIT_RUNTIME
    write_metrics_csv(record.records(), out / "metrics.csv")
    _save_predictions(out / "predictions.npz", preds)
    summary = {
        "dataset_id": record.dataset_id,
        "model_name": record.model_name,
        "variant": model.config.variant,
        "split": args.split,
        "n_images": len({i for i, _ in record.scores}),
        "n_prompts": record.n_prompts,
        "dice": record.aggregate,
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "manifest": str(Path(args.manifest).resolve()),
        "image_size": model.config.image_size,
    }
    _write_json(out / "summary.json", summary)
    if args.overlays:
        _write_overlays(manifest, preds, out / "overlays", model.config.image_size)
    print(f"{record.model_name} on {record.dataset_id}: dice {record.aggregate:.5f} "
          f"({len(record.scores)} image/prompt pairs)")
    return EXIT_OK


def _record_from_file(path: Path) -> tuple[MetricsRecord, dict]:
    rows = read_metrics_csv(path)
    summary_path = path.with_name("summary.json")
    summary = json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.is_file() else {}
    record = MetricsRecord.from_records(
        rows,
        dataset_id=summary.get("dataset_id", "dataset"),
        model_name=summary.get("model_name", path.parent.name or path.stem),
        n_prompts=summary.get("n_prompts"),
    )
    return record, summary


def cmd_report(args) -> int:
    if not args.metrics and args.fixtures is None:
        log.error("report needs at least one metrics file or --fixtures")
        return EXIT_USAGE
    try:
        baselines = None
        if args.fixtures is not None:
            baselines = load_fixture(None if args.fixtures == "default" else args.fixtures)
        records, summaries = [], []
        for m in args.metrics:
            rec, summary = _record_from_file(Path(m))
            records.append(rec)
            summaries.append((Path(m), rec, summary))
        deltas = []
        for d in args.delta or []:
            a, sep, b = d.partition(":")
            if not sep:
                raise ValueError(f"--delta expects MODEL:BASELINE, got {d!r}")
            deltas.append((a, b))
        table = render_table(records, baselines, deltas)
    except (ValueError, OSError, KeyError, DuplicateModelError, IncompletePromptGrid) as e:
        log.error("%s", e)
        return EXIT_USAGE

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(table.text, encoding="utf-8")
    (out / "table.csv").write_text(table.csv, encoding="utf-8")
    print(table.text, end="")

    if args.overlays:
        for path, rec, summary in summaries:
            pred_path = path.with_name("predictions.npz")
            if not pred_path.is_file() or "manifest" not in summary:
                log.warning("no predictions next to %s; skipping overlays", path)
                continue
            try:
                manifest = load_manifest(summary["manifest"])
                n = _write_overlays(manifest, _load_predictions(pred_path),
                                    out / "overlays" / rec.model_name, int(summary.get("image_size", 352)))
            except (ManifestError, OSError) as e:
                log.error("overlays for %s failed: %s", path, e)
                return EXIT_RUNTIME
            log.info("wrote %d overlays for %s", n, rec.model_name)
    return EXIT_OK


def cmd_make_toy_data(args) -> int:
    from .synthetic import make_disc_dataset

    m = make_disc_dataset(args.outdir, args.n_train, args.n_val, args.n_test, size=args.size, seed=args.seed)
    print(f"wrote {sum(len(v) for v in m.splits.values())} samples to {Path(args.outdir) / 'manifest.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlsme", description="VLSM + UNet stacking ensembles")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fine-tune an ensemble from a run config")
    t.add_argument("config")
    t.add_argument("--out-dir", default=None, help="override output_dir")
    t.add_argument("--seed", type=int, default=None, help="override seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="prompt-averaged Dice on a split")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("outdir")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--batch-size", type=int, default=10)
    e.add_argument("--variant", default=None, help="fail unless the checkpoint holds this variant")
    e.add_argument("--model-name", default=None)
    e.add_argument("--overlays", action="store_true", help="write FP/FN overlays")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="comparison table with gain rows")
    r.add_argument("metrics", nargs="*")
    r.add_argument("--fixtures", nargs="?", const="default", default=None,
                   help="baseline table JSON (bare flag: bundled published values)")
    r.add_argument("--delta", action="append", metavar="MODEL:BASELINE")
    r.add_argument("--overlays", action="store_true")
    r.add_argument("--out-dir", default=".")
    r.set_defaults(func=cmd_report)

    d = sub.add_parser("make-toy-data", help="write a synthetic disc dataset")
    d.add_argument("outdir")
    d.add_argument("--n-train", type=int, default=8)
    d.add_argument("--n-val", type=int, default=2)
    d.add_argument("--n-test", type=int, default=2)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_make_toy_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Test-set evaluation, comparison tables with gain rows, and FP/FN overlays."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .data import DatasetManifest, EmptySplitError, iterate_batches
from .losses import aggregate_prompt_averaged, dice_score

log = logging.getLogger(__name__)

TP_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)


class IncompletePromptGrid(ValueError):
    pass


class DuplicateModelError(ValueError):
    pass


@dataclass
class MetricsRecord:
    dataset_id: str
    model_name: str
    scores: dict[tuple[str, int], float] = field(default_factory=dict)
    n_prompts: int | None = None

    @property
    def aggregate(self) -> float:
        return aggregate_prompt_averaged(self.records())

    def records(self) -> list[tuple[str, int, float]]:
        return [(i, p, s) for (i, p), s in self.scores.items()]

    def add(self, image_id: str, prompt_id: int, score: float) -> None:
        key = (image_id, int(prompt_id))
        if key in self.scores:
            raise ValueError(f"duplicate record for {key}")
        self.scores[key] = float(score)

    def check_complete(self) -> None:
        """Every image must be scored under every prompt."""
        if not self.scores:
            raise IncompletePromptGrid(f"{self.model_name}/{self.dataset_id}: incomplete prompt grid (no records)")
        images = {i for i, _ in self.scores}
        prompts = set(range(self.n_prompts)) if self.n_prompts else {p for _, p in self.scores}
        expected = {(i, p) for i in images for p in prompts}
        missing = expected - self.scores.keys()
        extra = self.scores.keys() - expected
        if missing or extra:
            raise IncompletePromptGrid(
                f"{self.model_name}/{self.dataset_id}: incomplete prompt grid "
                f"({len(missing)} missing, {len(extra)} out-of-range image/prompt pairs)"
            )

    @classmethod
    def from_records(cls, records: Iterable[tuple[str, int, float]], dataset_id: str, model_name: str,
                     n_prompts: int | None = None) -> "MetricsRecord":
        rec = cls(dataset_id, model_name, n_prompts=n_prompts)
        for i, p, s in records:
            rec.add(i, p, s)
        return rec


@torch.no_grad()
def evaluate(model, manifest: DatasetManifest, split: str = "test", batch_size: int = 10,
             model_name: str | None = None, threshold: float = 0.5,
             on_prediction: Callable[[str, int, np.ndarray], None] | None = None) -> MetricsRecord:
    """Score every image of ``split`` under every prompt template.

    ``on_prediction(image_id, prompt_id, binary_pred)`` is called per pair,
    e.g. to write overlays.
    """
    if not manifest.split(split):
        raise EmptySplitError(f"split {split!r} of {manifest.dataset_id!r} is empty")
    was_training = model.training
    model.eval()
    record = MetricsRecord(manifest.dataset_id, model_name or model.config.model_name,
                           n_prompts=len(manifest.prompts))
    for batch in iterate_batches(manifest, split, batch_size, prompt_policy="all",
                                 size=model.config.image_size):
        logits = model(batch.images, batch.prompts).final_logits
        for k in range(len(batch)):
            record.add(batch.image_ids[k], batch.prompt_ids[k], dice_score(logits[k], batch.masks[k], threshold))
            if on_prediction is not None:
                pred = (torch.sigmoid(logits[k, 0]) > threshold).numpy().astype(np.uint8)
                on_prediction(batch.image_ids[k], batch.prompt_ids[k], pred)
    model.train(was_training)
    return record


@dataclass(frozen=True)
class DeltaRow:
    model_a: str
    model_b: str
    delta: float  # percentage points

    @property
    def display(self) -> str:
        return format_delta(self.delta)


def delta(dice_a: float, dice_b: float, model_a: str = "", model_b: str = "") -> DeltaRow:
    return DeltaRow(model_a, model_b, 100.0 * (dice_a - dice_b))


def format_dice(v: float) -> str:
    return f"{v:.5f}"


def format_delta(v: float) -> str:
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def load_fixture(path: str | Path | None = None) -> dict:
    """Load a baseline table; ``None`` gives the bundled published values."""
    if path is None:
        text = resources.files("vlsm_ensemble").joinpath("fixtures/table1.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text)
    for key in ("datasets", "models"):
        if key not in data:
            raise ValueError(f"fixture is missing {key!r}")
    data.setdefault("deltas", [])
    return data


@dataclass
class TableRow:
    label: str
    kind: str  # "model" or "delta"
    values: dict[str, float | None]


@dataclass
class Table:
    datasets: list[str]
    rows: list[TableRow]

    def cell(self, row: TableRow, ds: str) -> str:
        v = row.values.get(ds)
        if v is None:
            return "-"
        return format_dice(v) if row.kind == "model" else format_delta(v)

    def delta_rows(self) -> list[TableRow]:
        return [r for r in self.rows if r.kind == "delta"]

    @property
    def text(self) -> str:
        header = ["Model", *self.datasets]
        body = [[r.label, *(self.cell(r, d) for d in self.datasets)] for r in self.rows]
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        for row in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        return "\n".join(lines) + "\n"

    @property
    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", *self.datasets])
        for r in self.rows:
            w.writerow([r.label, *(self.cell(r, d) for d in self.datasets)])
        return buf.getvalue()


def render_table(records: Sequence[MetricsRecord], baselines: Mapping | None = None,
                 deltas: Sequence[tuple[str, str]] = ()) -> Table:
    """Lay out a model x dataset Dice table with gain rows interleaved.

    Baseline models come first in fixture order, followed by measured models.
    When measured records are present the columns are their datasets, and
    baseline datasets without measurements are dropped with a warning.
    Each gain row (``model`` vs ``baseline``) is placed right after ``model``.
    """
    baselines = baselines or {"datasets": [], "models": [], "deltas": []}
    if not records and not baselines["models"]:
        raise ValueError("nothing to tabulate: no records and no baselines")

    values: dict[str, dict[str, float]] = {}
    order: list[str] = []
    for m in baselines["models"]:
        values[m["name"]] = dict(m["dice"])
        order.append(m["name"])
    fixture_names = set(order)

    measured: dict[str, dict[str, float]] = {}
    record_datasets: list[str] = []
    for rec in records:
        rec.check_complete()
        if rec.model_name in fixture_names:
            raise DuplicateModelError(f"model {rec.model_name!r} collides with a baseline row")
        per = measured.setdefault(rec.model_name, {})
        if rec.dataset_id in per:
            raise DuplicateModelError(f"duplicate results for {rec.model_name!r} on {rec.dataset_id!r}")
        per[rec.dataset_id] = rec.aggregate
        if rec.dataset_id not in record_datasets:
            record_datasets.append(rec.dataset_id)
    for name, per in measured.items():
        values[name] = per
        order.append(name)

    if records:
        fixture_ds = list(baselines["datasets"])
        datasets = [d for d in fixture_ds if d in record_datasets] + [d for d in record_datasets if d not in fixture_ds]
        dropped = [d for d in fixture_ds if d not in record_datasets]
        if dropped:
            log.warning("baseline datasets without measured records omitted: %s", ", ".join(dropped))
    else:
        datasets = list(baselines["datasets"])

    pairs = [(d.get("label") or f"Delta {d['baseline']}", d["model"], d["baseline"]) for d in baselines["deltas"]]
    pairs += [(f"Delta {b}", a, b) for a, b in deltas]
    after: dict[str, list[tuple[str, str]]] = {}
    for label, a, b in pairs:
        if a in values and b in values:
            after.setdefault(a, []).append((label, b))

    rows = []
    for name in order:
        rows.append(TableRow(name, "model", {d: values[name].get(d) for d in datasets}))
        for label, b in after.get(name, []):
            dv = {}
            for d in datasets:
                va, vb = values[name].get(d), values[b].get(d)
                dv[d] = None if va is None or vb is None else delta(va, vb, name, b).delta
            rows.append(TableRow(label, "delta", dv))
    return Table(datasets, rows)


def overlay_categories(mask: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """0 = TN, 1 = TP, 2 = FP, 3 = FN."""
    mask = np.asarray(mask).astype(bool)
    pred = np.asarray(pred).astype(bool)
    if mask.shape != pred.shape:
        raise ValueError(f"mask {mask.shape} and prediction {pred.shape} differ")
    cat = np.zeros(mask.shape, dtype=np.uint8)
    cat[pred & mask] = 1
    cat[pred & ~mask] = 2
    cat[~pred & mask] = 3
    return cat


def overlay_counts(mask: np.ndarray, pred: np.ndarray) -> dict[str, int]:
    cat = overlay_categories(mask, pred)
    return {k: int((cat == v).sum()) for k, v in (("tn", 0), ("tp", 1), ("fp", 2), ("fn", 3))}


@dataclass
class Overlay:
    rgb: np.ndarray  # H x W x 3 uint8
    counts: dict[str, int]


def render_overlay(image: np.ndarray, mask: np.ndarray, pred: np.ndarray,
                   path: str | Path | None = None, alpha: float = 0.5) -> Overlay:
    """Tint TP green, FP red and FN blue over ``image``; TN stays untouched."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img.astype(np.float64) * 255), 0, 255).astype(np.uint8)
    cat = overlay_categories(mask, pred)
    if img.shape[:2] != cat.shape:
        raise ValueError(f"image {img.shape[:2]} and mask {cat.shape} differ")
    out = img.astype(np.float64)
    for code, color in ((1, TP_COLOR), (2, FP_COLOR), (3, FN_COLOR)):
        sel = cat == code
        out[sel] = (1 - alpha) * out[sel] + alpha * np.array(color, dtype=np.float64)
    rgb = np.clip(np.round(out), 0, 255).astype(np.uint8)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb).save(path)
    return Overlay(rgb, overlay_counts(mask, pred))

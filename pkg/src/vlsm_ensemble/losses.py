"""BCE + soft-Dice training loss, hard Dice metric and prompt-averaged aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F


class MaskValidationError(ValueError):
    pass


class AggregationError(ValueError):
    pass


@dataclass
class LossConfig:
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    smooth: float = 1e-6

    def __post_init__(self):
        if self.bce_weight < 0 or self.dice_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.bce_weight == 0 and self.dice_weight == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.smooth <= 0:
            raise ValueError("smooth must be > 0")


def _check_binary(mask: torch.Tensor) -> None:
    if not torch.all((mask == 0) | (mask == 1)):
        raise MaskValidationError("mask must contain only 0 and 1")


def _per_sample(x: torch.Tensor) -> torch.Tensor:
    # H x W is one sample; anything with a leading batch axis is flattened per item
    return x.reshape(1, -1) if x.dim() == 2 else x.reshape(x.shape[0], -1)


def soft_dice(probs: torch.Tensor, mask: torch.Tensor, smooth: float = 1e-6) -> torch.Tensor:
    """Per-sample soft Dice coefficient ``(2*sum(pm) + e) / (sum(p) + sum(m) + e)``."""
    p, m = _per_sample(probs), _per_sample(mask)
    return (2 * (p * m).sum(1) + smooth) / (p.sum(1) + m.sum(1) + smooth)


def combined_loss(config: LossConfig | None, logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    config = config or LossConfig()
    if logits.shape != mask.shape:
        raise MaskValidationError(f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} differ")
    _check_binary(mask)
    mask = mask.to(logits.dtype)
    loss = logits.new_zeros(())
    if config.bce_weight:
        loss = loss + config.bce_weight * F.binary_cross_entropy_with_logits(logits, mask)
    if config.dice_weight:
        dice = soft_dice(torch.sigmoid(logits), mask, config.smooth)
        loss = loss + config.dice_weight * (1 - dice).mean()
    return loss


def dice_score(pred_logits: torch.Tensor, mask: torch.Tensor, threshold: float = 0.5,
               smooth: float = 1e-6) -> float:
    """Hard Dice of ``sigmoid(logits) > threshold`` against a binary mask.

    Two empty maps score 1 through the smoothing term.
    """
    if pred_logits.shape != mask.shape:
        raise MaskValidationError(f"prediction {tuple(pred_logits.shape)} and mask {tuple(mask.shape)} differ")
    _check_binary(mask)
    pred = (torch.sigmoid(pred_logits.double()) > threshold).double().reshape(-1)
    m = mask.double().reshape(-1)
    inter = (pred * m).sum()
    return float((2 * inter + smooth) / (pred.sum() + m.sum() + smooth))


def batch_dice(pred_logits: torch.Tensor, masks: torch.Tensor, threshold: float = 0.5) -> list[float]:
    return [dice_score(p, m, threshold) for p, m in zip(pred_logits, masks)]


def aggregate_prompt_averaged(records: Iterable[tuple[str, int, float]]) -> float:
    """Mean Dice over (image, prompt) records; each pair may appear once."""
    seen = set()
    total = 0.0
    n = 0
    for image_id, prompt_id, score in records:
        key = (image_id, int(prompt_id))
        if key in seen:
            raise AggregationError(f"duplicate record for image {image_id!r}, prompt {prompt_id}")
        seen.add(key)
        total += float(score)
        n += 1
    if n == 0:
        raise AggregationError("no records to aggregate")
    return total / n


def write_metrics_csv(records: Sequence[tuple[str, int, float]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "prompt_id", "dice"])
        for image_id, prompt_id, score in records:
            w.writerow([image_id, int(prompt_id), repr(float(score))])
    return path


def read_metrics_csv(path: str | Path) -> list[tuple[str, int, float]]:
    """Parse ``image_id,prompt_id,dice`` rows; malformed rows raise ValueError
    naming the line."""
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["image_id", "prompt_id", "dice"]:
            raise ValueError(f"{path}:1: expected header image_id,prompt_id,dice, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                prompt_id, score = int(row[1]), float(row[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {row}") from None
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"{path}:{lineno}: dice {score} outside [0, 1]")
            rows.append((row[0], prompt_id, score))
    return rows

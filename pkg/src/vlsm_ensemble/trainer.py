"""Joint fine-tuning loop: AdamW over the trainable parts, early stopping on
validation Dice, best-checkpoint restore and frozen-encoder enforcement."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import torch

from .backbones import check_frozen
from .data import Batch, DatasetManifest, iterate_batches
from .ensemble import EnsembleModel, load_state, named_trainable, read_checkpoint, save_checkpoint
from .errors import ConfigurationError
from .losses import LossConfig, batch_dice, combined_loss

log = logging.getLogger(__name__)

HISTORY_HEADER = "epoch,train_loss,val_dice"


class TrainingAborted(RuntimeError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, image_ids, prompts, value):
        super().__init__(f"non-finite loss {value} on batch {list(image_ids)}")
        self.image_ids = list(image_ids)
        self.prompts = list(prompts)
        self.value = value


class GradientAnomalyError(FloatingPointError):
    def __init__(self, param_name: str):
        super().__init__(f"non-finite gradient in {param_name}")
        self.param_name = param_name


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 10
    patience: int = 20
    max_epochs: int = 500
    weight_decay: float = 1e-2
    seed: int = 0
    monitor: str = "val_dice"
    loss: LossConfig = field(default_factory=LossConfig)
    prompt_policy: str = "random_per_epoch"
    val_prompt: int = 0
    verify_frozen: bool = True

    def __post_init__(self):
        if isinstance(self.loss, Mapping):
            self.loss = LossConfig(**self.loss)
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.monitor != "val_dice":
            raise ConfigurationError(f"only val_dice can be monitored, got {self.monitor!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class EarlyStopping:
    """Maximizing early stopping with strict improvement; ties count as stale."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    best_checkpoint: Path
    history: list[dict]
    best_epoch: int
    best_val_dice: float
    stopped_epoch: int


def make_optimizer(model: EnsembleModel, config: TrainConfig) -> torch.optim.AdamW:
    params = [p for _, p in named_trainable(model)]
    return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)


def step(model: EnsembleModel, batch: Batch, optimizer: torch.optim.Optimizer,
         loss_config: LossConfig | None = None) -> float:
    """One forward/backward/AdamW update on ``final_logits``; returns the loss."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = model(batch.images, batch.prompts)
    loss = combined_loss(loss_config, out.final_logits, batch.masks)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(batch.image_ids, batch.prompts, loss.item())
    loss.backward()
    for name, p in named_trainable(model):
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise GradientAnomalyError(name)
    optimizer.step()
    return loss.item()


@torch.no_grad()
def validation_dice(model: EnsembleModel, manifest: DatasetManifest, config: TrainConfig,
                    split: str = "val") -> float:
    """Mean hard Dice over ``split`` with one fixed prompt per image."""
    was_training = model.training
    model.eval()
    scores = []
    for batch in iterate_batches(manifest, split, config.batch_size, seed=config.seed,
                                 prompt_policy="fixed", fixed_prompt=config.val_prompt,
                                 size=model.config.image_size):
        scores.extend(batch_dice(model(batch.images, batch.prompts).final_logits, batch.masks))
    model.train(was_training)
    return sum(scores) / len(scores)


def format_history(history: list[dict]) -> str:
    lines = [HISTORY_HEADER]
    for h in history:
        lines.append(f"{h['epoch']},{h['train_loss']!r},{h['val_dice']!r}")
    return "\n".join(lines) + "\n"


def _dump_bad_batch(out_dir: Path, epoch: int, batch_index: int, err: NonFiniteLossError) -> Path:
    path = out_dir / "nonfinite_batch.json"
    path.write_text(json.dumps({
        "epoch": epoch, "batch_index": batch_index, "image_ids": err.image_ids,
        "prompts": err.prompts, "loss": repr(err.value),
    }, indent=2) + "\n", encoding="utf-8")
    return path


def train(model: EnsembleModel, manifest: DatasetManifest, config: TrainConfig, out_dir: str | Path,
          evaluate_fn: Callable[[EnsembleModel, int], float] | None = None) -> TrainResult:
    """Fine-tune ``model`` until validation Dice stops improving.

    ``evaluate_fn(model, epoch)`` replaces the built-in validation pass when
    given. The best checkpoint is written to ``out_dir/best.pt`` and loaded
    back into ``model`` before returning.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if evaluate_fn is None and not manifest.split("val"):
        raise ConfigurationError("validation split is empty")
    best_path = out_dir / "best.pt"
    history_path = out_dir / "history.csv"

    torch.manual_seed(config.seed)
    optimizer = make_optimizer(model, config)
    frozen = model.freeze_report()
    stopper = EarlyStopping(config.patience)
    history: list[dict] = []
    epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        batches = iterate_batches(manifest, "train", config.batch_size, seed=config.seed * 1_000_003 + epoch,
                                  prompt_policy=config.prompt_policy, fixed_prompt=config.val_prompt,
                                  size=model.config.image_size)
        for i, batch in enumerate(batches):
            try:
                losses.append(step(model, batch, optimizer, config.loss))
            except NonFiniteLossError as e:
                dump = _dump_bad_batch(out_dir, epoch, i, e)
                raise TrainingAborted(f"epoch {epoch}: {e}; batch dumped to {dump}") from e
            except GradientAnomalyError as e:
                raise TrainingAborted(f"epoch {epoch}, batch {i}: {e}") from e
        train_loss = sum(losses) / len(losses)
        val = evaluate_fn(model, epoch) if evaluate_fn else validation_dice(model, manifest, config)
        if config.verify_frozen:
            check_frozen(frozen, model.freeze_report())

        improved = stopper.update(val, epoch)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_dice": float(val)})
        log.info("epoch %d loss %.5f val_dice %.5f%s", epoch, train_loss, val, " *" if improved else "")
        try:
            history_path.write_text(format_history(history), encoding="utf-8")
            if improved:
                save_checkpoint(model, best_path, extra={"epoch": epoch, "val_dice": float(val)})
        except OSError as e:
            raise TrainingAborted(f"cannot write to {out_dir}: {e}") from e
        if stopper.should_stop:
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    load_state(model, read_checkpoint(best_path))
    return TrainResult(best_path, history, stopper.best_epoch, stopper.best, epoch)

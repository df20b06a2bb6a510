"""The three stacking ensembles plus the single-model baselines.

Variants::

    A          BiomedCLIP VLSM + UNet-D   (adapter da1)
    B          CLIP VLSM + UNet-D         (adapter da2)
    C          both VLSMs + UNet-D        (da1 and da2)
    unet_only  UNet-D alone
    vlsm_only  VLSM decoder output alone

For A/B/C each VLSM's encoder bundle is adapted onto the UNet bottleneck
grid, concatenated with the bottleneck, gated by ECA and reduced back to the
bottleneck width; the final logits are the pixel-wise mean of the UNet logits
and every VLSM decoder's logits.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn as nn

from .adapters import AdapterConfig, BottleneckFusion, DataAdapter
from .backbones import FrozenEncoder, VlsmDecoder, build_decoder, freeze_report as encoder_freeze_report, load_backbone
from .errors import ConfigurationError
from .unet import UNetD, UnetConfig, check_resolution

VARIANTS = ("A", "B", "C", "unet_only", "vlsm_only")
SLOTS = ("biomedclip", "clip")
REQUIRED_SLOTS = {"A": ("biomedclip",), "B": ("clip",), "C": ("biomedclip", "clip"), "unet_only": ()}
ADAPTER_FOR_SLOT = {"biomedclip": "da1", "clip": "da2"}
FUSION_MODES = ("mean_logits",)
CHECKPOINT_FORMAT = "vlsm-ensemble/1"

DISPLAY_NAMES = {"A": "BiomedCLIPSeg-A", "B": "CLIPSeg-B", "C": "Ensemble-C", "unet_only": "UNet-D"}
VLSM_DISPLAY_NAMES = {"biomedclip": "BiomedCLIPSeg", "clip": "CLIPSeg"}


class CheckpointError(Exception):
    pass


def _reject_unknown(cls, data: Mapping, where: str) -> None:
    known = set(cls.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"{where}: unknown field(s) {sorted(unknown)}")


@dataclass
class BackboneConfig:
    name: str = "toy"
    weights: str | None = None
    seed: int = 0
    decoder_width: int = 64
    decoder_depth: int = 3
    decoder_heads: int = 4

    def __post_init__(self):
        if self.name not in ("biomedclip", "clip", "toy"):
            raise ConfigurationError(f"backbone name must be biomedclip, clip or toy, got {self.name!r}")


@dataclass
class EnsembleConfig:
    variant: str = "A"
    backbones: dict[str, BackboneConfig] = field(default_factory=dict)
    unet: UnetConfig = field(default_factory=UnetConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    fusion_mode: str = "mean_logits"
    image_size: int = 352

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        unknown = set(self.backbones) - set(SLOTS)
        if unknown:
            raise ConfigurationError(f"unknown backbone slot(s) {sorted(unknown)}; expected {SLOTS}")
        if self.variant == "vlsm_only":
            if not self.backbones:
                raise ConfigurationError("variant vlsm_only requires at least one backbone")
        else:
            need = set(REQUIRED_SLOTS[self.variant])
            missing = need - set(self.backbones)
            if missing:
                raise ConfigurationError(
                    f"variant {self.variant} requires backbone(s) {sorted(missing)}")
            extra = set(self.backbones) - need
            if extra:
                raise ConfigurationError(
                    f"variant {self.variant} does not use backbone(s) {sorted(extra)}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion_mode must be one of {FUSION_MODES}")
        check_resolution(self.image_size, self.image_size)

    @property
    def slots(self) -> list[str]:
        return [s for s in SLOTS if s in self.backbones]

    @property
    def model_name(self) -> str:
        if self.variant == "vlsm_only":
            return "+".join(VLSM_DISPLAY_NAMES[s] for s in self.slots)
        return DISPLAY_NAMES[self.variant]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapter"] = {"out_channels": self.adapter.out_channels}
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "EnsembleConfig":
        _reject_unknown(cls, data, "model")
        data = dict(data)
        backbones = data.pop("backbones", {}) or {}
        if not isinstance(backbones, Mapping):
            raise ConfigurationError("model.backbones must be an object keyed by slot")
        bb = {}
        for slot, spec in backbones.items():
            _reject_unknown(BackboneConfig, spec, f"model.backbones.{slot}")
            bb[slot] = BackboneConfig(**spec)
        unet = data.pop("unet", {}) or {}
        _reject_unknown(UnetConfig, unet, "model.unet")
        adapter = data.pop("adapter", {}) or {}
        if set(adapter) - {"out_channels"}:
            raise ConfigurationError(f"model.adapter: unknown field(s) {sorted(set(adapter) - {'out_channels'})}")
        return cls(backbones=bb, unet=UnetConfig(**unet), adapter=AdapterConfig(**adapter), **data)


@dataclass
class EnsembleOutput:
    final_logits: torch.Tensor  # B x 1 x H x W
    unet_logits: torch.Tensor | None
    vlsm_logits: dict[str, torch.Tensor]


class EnsembleModel(nn.Module):
    def __init__(self, config: EnsembleConfig, encoders: Mapping[str, FrozenEncoder]):
        super().__init__()
        self.config = config
        self.backbone = nn.ModuleDict({s: encoders[s] for s in config.slots})
        self.vlsm_decoder = nn.ModuleDict({
            s: build_decoder(encoders[s], config.backbones[s].decoder_width,
                             config.backbones[s].decoder_depth, config.backbones[s].decoder_heads)
            for s in config.slots
        })
        self.adapters = nn.ModuleDict()
        self.fusion = None
        self.unet = None
        if config.variant != "vlsm_only":
            self.unet = UNetD(config.unet, config.image_size)
        if config.variant in ("A", "B", "C"):
            grid = (config.image_size // 16, config.image_size // 16)
            for s in config.slots:
                enc = encoders[s]
                cfg = AdapterConfig(config.adapter.out_channels, source=s, target_grid=grid)
                self.adapters[ADAPTER_FOR_SLOT[s]] = DataAdapter(enc.embed_dim, enc.text_dim, cfg)
            self.fusion = BottleneckFusion(
                config.unet.bottleneck_channels,
                [config.adapter.out_channels] * len(config.slots),
            )

    @property
    def slots(self) -> list[str]:
        return self.config.slots

    def forward(self, images: torch.Tensor, prompts: Sequence[str]) -> EnsembleOutput:
        vlsm_logits: dict[str, torch.Tensor] = {}
        adapted = []
        for s in self.slots:
            bundle = self.backbone[s].encode(images, prompts)
            vlsm_logits[s] = self.vlsm_decoder[s](bundle)
            if self.fusion is not None:
                adapted.append(self.adapters[ADAPTER_FOR_SLOT[s]](bundle))

        unet_logits = None
        if self.unet is not None:
            bottleneck, skips = self.unet.encode(images)
            if self.fusion is not None:
                bottleneck = self.fusion(bottleneck, adapted)
            unet_logits = self.unet.decode(bottleneck, skips)

        if self.config.variant == "unet_only":
            final = unet_logits
        else:
            heads = ([unet_logits] if unet_logits is not None else []) + list(vlsm_logits.values())
            final = torch.stack(heads, dim=0).mean(dim=0)
        return EnsembleOutput(final_logits=final, unet_logits=unet_logits, vlsm_logits=vlsm_logits)

    def frozen_parameter_ids(self) -> set[str]:
        return {f"backbone.{s}.{n}" for s in self.slots for n in self.backbone[s].spec.frozen_param_ids}

    def freeze_report(self) -> dict[str, str]:
        report = {}
        for s in self.slots:
            report.update(encoder_freeze_report(self.backbone[s], prefix=f"backbone.{s}."))
        return report


def trainable_parameters(model: EnsembleModel) -> set[str]:
    """Names of every parameter the optimizer may update (everything but encoders)."""
    frozen = model.frozen_parameter_ids()
    return {n for n, p in model.named_parameters() if p.requires_grad and n not in frozen}


def named_trainable(model: EnsembleModel) -> list[tuple[str, nn.Parameter]]:
    names = trainable_parameters(model)
    return [(n, p) for n, p in model.named_parameters() if n in names]


def build_encoders(config: EnsembleConfig) -> dict[str, FrozenEncoder]:
    encoders = {}
    for s in config.slots:
        bc = config.backbones[s]
        encoders[s] = load_backbone(bc.name, bc.weights, seed=bc.seed)
    return encoders


def build_model(config: EnsembleConfig, seed: int = 0,
                encoders: Mapping[str, FrozenEncoder] | None = None) -> EnsembleModel:
    """Build an ensemble; trainable parts are initialized from ``seed``."""
    encoders = dict(encoders) if encoders is not None else build_encoders(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EnsembleModel(config, encoders)


def save_checkpoint(model: EnsembleModel, path: str | Path, extra: Mapping | None = None,
                    store_backbone: bool | None = None) -> Path:
    """Write the ensemble archive atomically.

    Toy backbones are stored; real backbones are referenced by their
    parameter checksums and reloaded from their weights on load.
    """
    path = Path(path)
    state = model.state_dict()
    refs = {}
    for s in model.slots:
        keep = store_backbone if store_backbone is not None else model.config.backbones[s].name == "toy"
        if not keep:
            prefix = f"backbone.{s}."
            state = {k: v for k, v in state.items() if not k.startswith(prefix)}
            refs[s] = encoder_freeze_report(model.backbone[s])
    archive = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "state": state,
        "backbone_refs": refs,
        "extra": dict(extra or {}),
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        torch.save(archive, tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def read_checkpoint(path: str | Path) -> dict:
    try:
        archive = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as e:  # unpickler errors vary by corruption type
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return archive


def load_state(model: EnsembleModel, archive: Mapping) -> None:
    refs = archive.get("backbone_refs", {})
    missing, unexpected = model.load_state_dict(archive["state"], strict=False)
    referenced = tuple(f"backbone.{s}." for s in refs)
    missing = [k for k in missing if not k.startswith(referenced)]
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint does not match model: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for s, report in refs.items():
        if encoder_freeze_report(model.backbone[s]) != report:
            raise CheckpointError(f"backbone {s!r} weights differ from the checkpointed checksums")


def load_checkpoint(path: str | Path, encoders: Mapping[str, FrozenEncoder] | None = None
                    ) -> tuple[EnsembleModel, dict]:
    archive = read_checkpoint(path)
    try:
        config = EnsembleConfig.from_dict(archive["config"])
    except (ConfigurationError, TypeError) as e:
        raise CheckpointError(f"{path}: invalid embedded config: {e}") from e
    model = build_model(config, encoders=encoders)
    load_state(model, archive)
    return model, dict(archive.get("extra", {}))

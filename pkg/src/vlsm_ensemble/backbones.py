"""Frozen vision-language encoders and the trainable text-conditioned decoder.

Every encoder maps ``(images, prompts)`` to an :class:`EncoderBundle` whose
patch-token grid is resampled to ``H // 16`` on each side, so the adapters see
the same grid regardless of the backbone's native patch size or resolution.
Encoder parameters never receive gradients; decoders are fully trainable.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, FreezeViolation

log = logging.getLogger(__name__)

GRID_STRIDE = 16
BACKBONE_NAMES = ("biomedclip", "clip", "toy")

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
BIOMEDCLIP_HUB_ID = "hf-hub:microsoft/BiomedCLIP-PubMedBERT_256-vit_base_patch16_224"


class PromptTruncatedWarning(UserWarning):
    pass


@dataclass
class EncoderBundle:
    patch_tokens: torch.Tensor  # B x G*G x D
    pooled_image_embed: torch.Tensor  # B x D
    text_embed: torch.Tensor  # B x D_t
    grid_side: int
    image_size: tuple[int, int]

    def __post_init__(self):
        if self.grid_side ** 2 != self.patch_tokens.shape[1]:
            raise ValueError(
                f"grid_side {self.grid_side} does not match {self.patch_tokens.shape[1]} tokens"
            )


@dataclass
class VlsmOutput:
    bundle: EncoderBundle
    decoder_logits: torch.Tensor  # B x 1 x H x W


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    D: int
    D_t: int
    patch: int
    frozen_param_ids: frozenset[str]


def tensor_checksum(t: torch.Tensor) -> str:
    data = t.detach().cpu().contiguous().reshape(-1).view(torch.uint8).numpy()
    return hashlib.sha256(data.tobytes()).hexdigest()


def check_frozen(before: Mapping[str, str], after: Mapping[str, str]) -> None:
    """Raise :class:`FreezeViolation` if any checksum changed or went missing."""
    changed = sorted(k for k, v in before.items() if after.get(k) != v)
    if changed:
        raise FreezeViolation(f"{len(changed)} frozen parameter(s) changed: {changed[:5]}")


def resize_token_grid(tokens: torch.Tensor, target: int) -> tuple[torch.Tensor, int]:
    """Bilinearly resample a ``B x g*g x D`` token sequence to ``target x target``."""
    b, n, d = tokens.shape
    g = math.isqrt(n)
    if g * g != n:
        raise ValueError(f"{n} patch tokens do not form a square grid")
    if g == target:
        return tokens, g
    grid = tokens.transpose(1, 2).reshape(b, d, g, g)
    grid = F.interpolate(grid, size=(target, target), mode="bilinear", align_corners=False)
    return grid.flatten(2).transpose(1, 2), target


def sincos_1d(n: int, dim: int, device=None) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float32, device=device)[:, None]
    omega = torch.exp(-math.log(10000.0) * torch.arange(0, dim // 2, dtype=torch.float32, device=device) / (dim // 2))
    ang = pos * omega[None]
    return torch.cat([ang.sin(), ang.cos()], dim=1)


def sincos_2d(g: int, dim: int, device=None) -> torch.Tensor:
    half = sincos_1d(g, dim // 2, device)
    rows = half[:, None, :].expand(g, g, dim // 2)
    cols = half[None, :, :].expand(g, g, dim // 2)
    return torch.cat([rows, cols], dim=-1).reshape(g * g, dim)


class FrozenEncoder(nn.Module):
    """Base class for the image/text encoder pair of a VLSM.

    Subclasses implement ``_encode_image`` (normalized pixels to tokens at the
    native grid plus a pooled vector) and ``_encode_text``.
    """

    name: str = "base"
    embed_dim: int
    text_dim: int
    patch: int
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):
        # encoders stay in eval mode so dropout/norm statistics never move
        return super().train(False)

    @property
    def spec(self) -> BackboneSpec:
        return BackboneSpec(
            name=self.name,
            D=self.embed_dim,
            D_t=self.text_dim,
            patch=self.patch,
            frozen_param_ids=frozenset(n for n, _ in self.named_parameters()),
        )

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.mean, dtype=images.dtype, device=images.device).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=images.dtype, device=images.device).view(1, 3, 1, 1)
        return (images - mean) / std

    def _warn_truncated(self, prompt: str, limit: int) -> None:
        msg = f"{self.name}: prompt truncated to {limit} tokens: {prompt[:60]!r}"
        log.warning(msg)
        warnings.warn(msg, PromptTruncatedWarning, stacklevel=3)

    def _encode_image(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def _encode_text(self, prompts: Sequence[str], device) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, images: torch.Tensor, prompts: Sequence[str]) -> EncoderBundle:
        return self.encode(images, prompts)

    @torch.no_grad()
    def encode(self, images: torch.Tensor, prompts: Sequence[str]) -> EncoderBundle:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
        if len(prompts) != images.shape[0]:
            raise ValueError(f"{len(prompts)} prompts for {images.shape[0]} images")
        h, w = images.shape[-2:]
        tokens, pooled = self._encode_image(self.normalize(images))
        tokens, g = resize_token_grid(tokens, h // GRID_STRIDE)
        text = self._encode_text(prompts, images.device)
        bundle = EncoderBundle(
            patch_tokens=tokens.float(),
            pooled_image_embed=pooled.float(),
            text_embed=text.float(),
            grid_side=g,
            image_size=(h, w),
        )
        for field_name in ("patch_tokens", "pooled_image_embed", "text_embed"):
            if not torch.isfinite(getattr(bundle, field_name)).all():
                raise FloatingPointError(f"{self.name} encoder produced non-finite {field_name}")
        return bundle


def _transformer_layer(dim: int, heads: int, ff: int) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        dim, heads, dim_feedforward=ff, dropout=0.0, activation="gelu",
        batch_first=True, norm_first=True,
    )


class ToyEncoder(FrozenEncoder):
    """Small seeded ViT + byte-level text transformer.

    Stands in for a pretrained CLIP-family encoder so the full pipeline can
    run without downloading weights.
    """

    PAD, BOS, EOS = 0, 1, 2
    VOCAB = 256 + 3

    def __init__(self, seed: int = 0, embed_dim: int = 64, text_dim: int = 64, patch: int = 16,
                 depth: int = 2, text_depth: int = 1, heads: int = 4, max_text_len: int = 32,
                 name: str = "toy"):
        super().__init__()
        self.name = name
        self.seed = seed
        self.embed_dim = embed_dim
        self.text_dim = text_dim
        self.patch = patch
        self.max_text_len = max_text_len
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = nn.Conv2d(3, embed_dim, patch, stride=patch)
            self.cls_token = nn.Parameter(0.02 * torch.randn(1, 1, embed_dim))
            self.blocks = nn.ModuleList(_transformer_layer(embed_dim, heads, 2 * embed_dim) for _ in range(depth))
            self.norm = nn.LayerNorm(embed_dim)
            self.tok_embed = nn.Embedding(self.VOCAB, text_dim)
            self.text_blocks = nn.ModuleList(_transformer_layer(text_dim, heads, 2 * text_dim) for _ in range(text_depth))
            self.text_norm = nn.LayerNorm(text_dim)
            self.text_proj = nn.Linear(text_dim, text_dim)
        self.freeze()

    def tokenize(self, prompts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        rows = []
        for p in prompts:
            ids = [b + 3 for b in p.encode("utf-8")]
            if len(ids) + 2 > self.max_text_len:
                self._warn_truncated(p, self.max_text_len)
                ids = ids[: self.max_text_len - 2]
            rows.append([self.BOS, *ids, self.EOS])
        n = max(len(r) for r in rows)
        ids = torch.full((len(rows), n), self.PAD, dtype=torch.long)
        lengths = torch.tensor([len(r) for r in rows])
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
        return ids, lengths

    def _encode_image(self, images):
        x = self.patch_embed(images)
        g = x.shape[-1]
        x = x.flatten(2).transpose(1, 2) + sincos_2d(g, self.embed_dim, x.device)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x[:, 1:], x[:, 0]

    def _encode_text(self, prompts, device):
        ids, lengths = self.tokenize(prompts)
        ids, lengths = ids.to(device), lengths.to(device)
        pad = ids == self.PAD
        x = self.tok_embed(ids) + sincos_1d(ids.shape[1], self.text_dim, device)
        for blk in self.text_blocks:
            x = blk(x, src_key_padding_mask=pad)
        x = self.text_norm(x)
        eos = x[torch.arange(x.shape[0], device=device), lengths - 1]
        return self.text_proj(eos)


class HFClipEncoder(FrozenEncoder):
    """Wraps a ``transformers`` ``CLIPModel``; runs the ViT at the input size
    with interpolated position embeddings."""

    mean = CLIP_MEAN
    std = CLIP_STD

    def __init__(self, model, tokenizer, name: str = "clip"):
        super().__init__()
        self.name = name
        self.vision_model = model.vision_model
        self.text_model = model.text_model
        self.text_projection = model.text_projection
        self.tokenizer = tokenizer
        self.embed_dim = model.config.vision_config.hidden_size
        self.text_dim = model.config.projection_dim
        self.patch = model.config.vision_config.patch_size
        self.max_text_len = model.config.text_config.max_position_embeddings
        self.freeze()

    def _encode_image(self, images):
        out = self.vision_model(pixel_values=images, interpolate_pos_encoding=True)
        return out.last_hidden_state[:, 1:], out.pooler_output

    def _encode_text(self, prompts, device):
        for p in prompts:
            if len(self.tokenizer(p)["input_ids"]) > self.max_text_len:
                self._warn_truncated(p, self.max_text_len)
        enc = self.tokenizer(list(prompts), padding=True, truncation=True,
                             max_length=self.max_text_len, return_tensors="pt")
        out = self.text_model(input_ids=enc["input_ids"].to(device),
                              attention_mask=enc["attention_mask"].to(device))
        return self.text_projection(out.pooler_output)


class OpenClipEncoder(FrozenEncoder):
    """Wraps an ``open_clip`` model (BiomedCLIP is distributed this way).

    Images are resized to the model's native resolution; the resulting token
    grid (14 x 14 for BiomedCLIP) is resampled to the pipeline grid.
    """

    def __init__(self, model, tokenizer, name: str = "biomedclip", native_size: int | None = None,
                 mean=CLIP_MEAN, std=CLIP_STD):
        super().__init__()
        self.name = name
        self.model = model
        self.tokenizer = tokenizer
        self.mean, self.std = tuple(mean), tuple(std)
        visual = model.visual
        size = native_size or getattr(visual, "image_size", 224)
        self.native_size = size[0] if isinstance(size, (tuple, list)) else int(size)
        if hasattr(visual, "trunk"):
            self.embed_dim = visual.trunk.embed_dim
            self.patch = visual.trunk.patch_embed.patch_size[0]
        else:
            self.embed_dim = visual.transformer.width
            self.patch = visual.patch_size[0] if isinstance(visual.patch_size, tuple) else visual.patch_size
        self.context_length = getattr(tokenizer, "context_length", 77)
        with torch.no_grad():
            dummy = tokenizer(["x"], context_length=self.context_length)
            self.text_dim = model.encode_text(dummy).shape[-1]
        self.freeze()

    def _token_count(self, prompt: str) -> int:
        inner = getattr(self.tokenizer, "tokenizer", None)
        if inner is not None:
            return len(inner(prompt)["input_ids"])
        return len(self.tokenizer.encode(prompt)) + 2

    def _encode_image(self, images):
        if images.shape[-1] != self.native_size or images.shape[-2] != self.native_size:
            images = F.interpolate(images, size=(self.native_size, self.native_size),
                                   mode="bilinear", align_corners=False)
        visual = self.model.visual
        if hasattr(visual, "trunk"):
            feats = visual.trunk.forward_features(images)
            prefix = getattr(visual.trunk, "num_prefix_tokens", 1)
            return feats[:, prefix:], feats[:, 0]
        visual.output_tokens = True
        _, tokens = visual(images)
        return tokens, tokens.mean(dim=1)

    def _encode_text(self, prompts, device):
        for p in prompts:
            if self._token_count(p) > self.context_length:
                self._warn_truncated(p, self.context_length)
        ids = self.tokenizer(list(prompts), context_length=self.context_length).to(device)
        return self.model.encode_text(ids)


def load_backbone(name: str, weights: str | None = None, seed: int = 0,
                  cache_dir: str | None = None) -> FrozenEncoder:
    """Build a frozen encoder by backbone name.

    ``weights`` is a local checkpoint path or hub identifier for the real
    backbones; the toy backbone only takes ``seed``. ``cache_dir`` defaults
    to ``$VLSME_CACHE``.
    """
    if name not in BACKBONE_NAMES:
        raise ConfigurationError(f"unknown backbone {name!r}; expected one of {BACKBONE_NAMES}")
    if name == "toy":
        return ToyEncoder(seed=seed)
    cache_dir = cache_dir or os.environ.get("VLSME_CACHE")
    if name == "clip":
        from transformers import CLIPModel, CLIPTokenizer

        src = weights or "openai/clip-vit-base-patch16"
        model = CLIPModel.from_pretrained(src, cache_dir=cache_dir)
        tokenizer = CLIPTokenizer.from_pretrained(src, cache_dir=cache_dir)
        return HFClipEncoder(model.eval(), tokenizer)

    import open_clip

    if weights and os.path.isfile(weights):
        model, _, preprocess = open_clip.create_model_and_transforms(
            BIOMEDCLIP_HUB_ID, pretrained=weights, cache_dir=cache_dir)
    else:
        model, preprocess = open_clip.create_model_from_pretrained(
            weights or BIOMEDCLIP_HUB_ID, cache_dir=cache_dir)
    tokenizer = open_clip.get_tokenizer(BIOMEDCLIP_HUB_ID, cache_dir=cache_dir)
    norm = next((t for t in getattr(preprocess, "transforms", []) if hasattr(t, "mean")), None)
    kwargs = {"mean": norm.mean, "std": norm.std} if norm is not None else {}
    return OpenClipEncoder(model.eval(), tokenizer, **kwargs)


class FiLM(nn.Module):
    """Per-channel scale and shift of token features predicted from text."""

    def __init__(self, width: int, text_dim: int):
        super().__init__()
        self.scale = nn.Linear(text_dim, width)
        self.shift = nn.Linear(text_dim, width)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return x * (1 + self.scale(cond)[:, None]) + self.shift(cond)[:, None]


class VlsmDecoder(nn.Module):
    """Text-conditioned transformer decoder over the patch-token grid.

    Before each self-attention layer the tokens are FiLM-modulated by the text
    embedding; a linear head maps every token to a ``patch x patch`` pixel
    block, and the result is bilinearly resized to the input resolution.
    """

    def __init__(self, token_dim: int, text_dim: int, width: int = 64, depth: int = 3,
                 heads: int = 4, patch: int = GRID_STRIDE):
        super().__init__()
        self.token_dim = token_dim
        self.text_dim = text_dim
        self.patch = patch
        self.in_proj = nn.Linear(token_dim, width)
        self.films = nn.ModuleList(FiLM(width, text_dim) for _ in range(depth))
        self.layers = nn.ModuleList(_transformer_layer(width, heads, 4 * width) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, patch * patch)

    def forward(self, bundle: EncoderBundle) -> torch.Tensor:
        tokens, text = bundle.patch_tokens, bundle.text_embed
        if tokens.shape[-1] != self.token_dim or text.shape[-1] != self.text_dim:
            raise ConfigurationError(
                f"decoder expects token dim {self.token_dim} / text dim {self.text_dim}, "
                f"bundle has {tokens.shape[-1]} / {text.shape[-1]}"
            )
        x = self.in_proj(tokens)
        for film, layer in zip(self.films, self.layers):
            x = layer(film(x, text))
        x = self.head(self.norm(x))  # B x G*G x p*p
        b, g, p = x.shape[0], bundle.grid_side, self.patch
        x = x.transpose(1, 2).reshape(b, p * p, g, g)
        x = F.pixel_shuffle(x, p)  # B x 1 x G*p x G*p
        if tuple(x.shape[-2:]) != tuple(bundle.image_size):
            x = F.interpolate(x, size=bundle.image_size, mode="bilinear", align_corners=False)
        return x


def build_decoder(encoder: FrozenEncoder, width: int = 64, depth: int = 3, heads: int = 4) -> VlsmDecoder:
    return VlsmDecoder(encoder.embed_dim, encoder.text_dim, width=width, depth=depth, heads=heads)


def encode(encoder: FrozenEncoder, images: torch.Tensor, prompts: Sequence[str]) -> EncoderBundle:
    return encoder.encode(images, prompts)


def decode(decoder: VlsmDecoder, bundle: EncoderBundle) -> VlsmOutput:
    return VlsmOutput(bundle=bundle, decoder_logits=decoder(bundle))


def freeze_report(encoder: nn.Module, prefix: str = "",
                  param_ids: Sequence[str] | None = None) -> dict[str, str]:
    """Content checksums ``{param_id: sha256}`` of the frozen parameters.

    Defaults to every parameter of ``encoder``; ``param_ids`` restricts or
    extends the set (ids are relative to ``encoder``).
    """
    params = dict(encoder.named_parameters())
    ids = sorted(params) if param_ids is None else list(param_ids)
    return {f"{prefix}{i}": tensor_checksum(params[i]) for i in ids}

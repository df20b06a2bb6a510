"""Dataset manifests, sample loading and deterministic batch iteration.

A manifest is one JSON document per dataset::

    {"dataset_id": "kvasir", "image_dir": "images", "mask_dir": "masks",
     "image_ext": ".jpg", "mask_ext": ".png",
     "prompts": ["a pink polyp", ...],
     "splits": {"train": [...], "val": [...], "test": [...]}}

``image_dir`` and ``mask_dir`` are resolved relative to the manifest file.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

DEFAULT_IMAGE_SIZE = 352
SPLITS = ("train", "val", "test")
PROMPT_POLICIES = ("random_per_epoch", "fixed", "all")


class ManifestError(Exception):
    pass


class ManifestLoadError(ManifestError):
    pass


class ManifestValidationError(ManifestError):
    pass


class ImageDecodeError(Exception):
    pass


class EmptySplitError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    prompt: str
    image_id: str
    dataset_id: str
    prompt_id: int


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x H x W
    masks: torch.Tensor  # B x 1 x H x W
    prompts: list[str]
    image_ids: list[str]
    prompt_ids: list[int]
    dataset_id: str

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    dataset_id: str
    image_dir: str
    mask_dir: str
    image_ext: str
    mask_ext: str
    prompts: tuple[str, ...]
    splits: dict[str, tuple[str, ...]] = field(hash=False)

    def image_path(self, image_id: str) -> Path:
        return self.root / self.image_dir / f"{image_id}{self.image_ext}"

    def mask_path(self, image_id: str) -> Path:
        return self.root / self.mask_dir / f"{image_id}{self.mask_ext}"

    def split(self, name: str) -> tuple[str, ...]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return self.splits.get(name, ())

    def all_ids(self) -> set[str]:
        return {i for ids in self.splits.values() for i in ids}

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "image_dir": self.image_dir,
            "mask_dir": self.mask_dir,
            "image_ext": self.image_ext,
            "mask_ext": self.mask_ext,
            "prompts": list(self.prompts),
            "splits": {k: list(v) for k, v in self.splits.items()},
        }


def _normalize_ext(ext: str) -> str:
    return ext if ext.startswith(".") else f".{ext}"


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check split disjointness, prompt presence and file existence."""
    if not manifest.prompts:
        raise ManifestValidationError("manifest needs at least one prompt template")
    for i, p in enumerate(manifest.prompts):
        if not isinstance(p, str) or not p.strip():
            raise ManifestValidationError(f"prompt template {i} is empty")

    for name, ids in manifest.splits.items():
        if len(set(ids)) != len(ids):
            raise ManifestValidationError(f"split {name!r} lists an id more than once")
    names = sorted(manifest.splits)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = set(manifest.splits[a]) & set(manifest.splits[b])
            if common:
                raise ManifestValidationError(
                    f"overlapping splits: {a!r} and {b!r} share {sorted(common)[:5]}"
                )

    for image_id in sorted(manifest.all_ids()):
        if not manifest.image_path(image_id).is_file():
            raise ManifestValidationError(f"missing image for id {image_id!r}: {manifest.image_path(image_id)}")
        if not manifest.mask_path(image_id).is_file():
            raise ManifestValidationError(f"missing mask for id {image_id!r}: {manifest.mask_path(image_id)}")


def manifest_from_dict(data: dict, root: str | Path) -> DatasetManifest:
    try:
        splits = data["splits"]
        unknown = set(splits) - set(SPLITS)
        if unknown:
            raise ManifestValidationError(f"unknown split names {sorted(unknown)}")
        manifest = DatasetManifest(
            root=Path(root),
            dataset_id=str(data["dataset_id"]),
            image_dir=str(data["image_dir"]),
            mask_dir=str(data["mask_dir"]),
            image_ext=_normalize_ext(str(data["image_ext"])),
            mask_ext=_normalize_ext(str(data["mask_ext"])),
            prompts=tuple(data["prompts"]),
            splits={k: tuple(str(i) for i in splits.get(k, [])) for k in SPLITS},
        )
    except KeyError as e:
        raise ManifestValidationError(f"manifest is missing field {e.args[0]!r}") from None
    except (TypeError, AttributeError) as e:
        raise ManifestValidationError(f"malformed manifest: {e}") from None
    validate_manifest(manifest)
    return manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestLoadError(f"cannot read manifest {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestLoadError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
    if not isinstance(data, dict):
        raise ManifestValidationError(f"{path}: manifest must be a JSON object")
    return manifest_from_dict(data, path.parent)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageDecodeError(f"cannot decode {path}: {e}") from e
    return img


def load_image(path: Path, size: int) -> np.ndarray:
    img = _open(path).convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_mask(path: Path, size: int) -> np.ndarray:
    if not path.is_file():
        raise ManifestValidationError(f"missing mask file {path}")
    img = _open(path)
    if img.mode not in ("L", "1", "P", "I", "I;16"):
        img = img.convert("L")
    raw = np.asarray(img).astype(np.float32)
    # 0/1-valued mask files are common; only rescale 8/16-bit ranges
    if raw.max() > 1.0:
        raw = raw / (65535.0 if raw.max() > 255 else 255.0)
    small = Image.fromarray(raw.astype(np.float32))
    if small.size != (size, size):
        small = small.resize((size, size), Image.NEAREST)
    return (np.asarray(small) >= 0.5).astype(np.uint8)


def make_sample(manifest: DatasetManifest, image_id: str, prompt_id: int,
                size: int = DEFAULT_IMAGE_SIZE) -> Sample:
    if image_id not in manifest.all_ids():
        raise KeyError(f"image id {image_id!r} is not in manifest {manifest.dataset_id!r}")
    if not 0 <= prompt_id < len(manifest.prompts):
        raise IndexError(f"prompt_id {prompt_id} out of range for {len(manifest.prompts)} templates")
    image = load_image(manifest.image_path(image_id), size)
    mask = load_mask(manifest.mask_path(image_id), size)
    return Sample(
        image=image,
        mask=mask,
        prompt=manifest.prompts[prompt_id],
        image_id=image_id,
        dataset_id=manifest.dataset_id,
        prompt_id=prompt_id,
    )


def collate(samples: Sequence[Sample]) -> Batch:
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    masks = torch.from_numpy(np.stack([s.mask for s in samples])).unsqueeze(1).float()
    return Batch(
        images=images,
        masks=masks,
        prompts=[s.prompt for s in samples],
        image_ids=[s.image_id for s in samples],
        prompt_ids=[s.prompt_id for s in samples],
        dataset_id=samples[0].dataset_id,
    )


def sample_pairs(manifest: DatasetManifest, split: str, seed: int = 0,
                 prompt_policy: str = "random_per_epoch",
                 fixed_prompt: int = 0) -> list[tuple[str, int]]:
    """The ordered (image_id, prompt_id) pairs one pass over ``split`` visits.

    Train is shuffled by ``seed``; val/test keep manifest order. With
    ``prompt_policy="all"`` every image appears once per template.
    """
    ids = list(manifest.split(split))
    if not ids:
        raise EmptySplitError(f"split {split!r} of {manifest.dataset_id!r} is empty")
    if prompt_policy not in PROMPT_POLICIES:
        raise ValueError(f"unknown prompt policy {prompt_policy!r}")
    n_prompts = len(manifest.prompts)
    rng = random.Random(seed)
    if split == "train":
        rng.shuffle(ids)

    if prompt_policy == "all":
        return [(i, p) for i in ids for p in range(n_prompts)]
    if prompt_policy == "fixed":
        if not 0 <= fixed_prompt < n_prompts:
            raise IndexError(f"fixed prompt {fixed_prompt} out of range")
        return [(i, fixed_prompt) for i in ids]
    return [(i, rng.randrange(n_prompts)) for i in ids]


def iterate_batches(manifest: DatasetManifest, split: str, batch_size: int = 10, seed: int = 0,
                    prompt_policy: str = "random_per_epoch", fixed_prompt: int = 0,
                    size: int = DEFAULT_IMAGE_SIZE) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    # resolve eagerly so an empty split fails at call time, not on first next()
    pairs = sample_pairs(manifest, split, seed, prompt_policy, fixed_prompt)

    def gen() -> Iterator[Batch]:
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            yield collate([make_sample(manifest, i, p, size) for i, p in chunk])

    return gen()

"""Seeded disc-on-noise segmentation datasets written in the manifest layout."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .data import DatasetManifest, load_manifest, write_manifest

DEFAULT_PROMPTS = ("a bright round lesion", "a circular region", "a disc in the image")


def disc_image(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One RGB uint8 image with a brighter disc and its 0/255 mask."""
    yy, xx = np.mgrid[0:size, 0:size]
    r = rng.uniform(0.15, 0.3) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    base = rng.uniform(0.15, 0.35, size=3)
    img = base + 0.05 * rng.standard_normal((size, size, 3))
    img[mask] += np.array([0.5, 0.35, 0.2])
    img = np.clip(img, 0, 1)
    return (img * 255).round().astype(np.uint8), mask.astype(np.uint8) * 255


def make_disc_dataset(root: str | Path, n_train: int = 8, n_val: int = 2, n_test: int = 2,
                      size: int = 64, seed: int = 0, prompts: Sequence[str] = DEFAULT_PROMPTS,
                      dataset_id: str = "discs") -> DatasetManifest:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    splits = {}
    k = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        ids = []
        for _ in range(n):
            image_id = f"{split}_{k:04d}"
            img, mask = disc_image(size, rng)
            Image.fromarray(img).save(root / "images" / f"{image_id}.png")
            Image.fromarray(mask).save(root / "masks" / f"{image_id}.png")
            ids.append(image_id)
            k += 1
        splits[split] = ids
    manifest = DatasetManifest(
        root=root, dataset_id=dataset_id, image_dir="images", mask_dir="masks",
        image_ext=".png", mask_ext=".png", prompts=tuple(prompts),
        splits={k: tuple(v) for k, v in splits.items()},
    )
    return load_manifest(write_manifest(manifest, root / "manifest.json"))

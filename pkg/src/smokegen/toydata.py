"""Synthetic blob fixtures for desk-scale runs: bright rectangular plumes on
dark backgrounds, sized so the whole train/generate path fits in CPU seconds."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .corpus import BinaryMask, Manifest, SmokeSample

SMOKE_CAPTION = "pale smoke over a dark ridge"
BACKGROUND_CAPTION = "a dark forested ridge at dusk"


def make_blob_arrays(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One sample: image float32 [0,1] with a bright blob exactly inside the mask."""
    bg = 0.05 + 0.02 * rng.random()
    image = np.full((size, size), bg, dtype=np.float32)
    lo = max(2, size // 3)
    hi = max(lo + 1, (3 * size) // 4)
    w = int(rng.integers(lo, hi))
    h = int(rng.integers(lo, hi))
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    bits = np.zeros((size, size), dtype=np.uint8)
    bits[y0 : y0 + h, x0 : x0 + w] = 1
    image[bits == 1] = 0.92 + 0.04 * rng.random()
    return np.clip(image, 0.0, 1.0), bits


def make_blob_batch(
    n: int, size: int, rng: np.random.Generator, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    images = np.empty((n, 1, size, size), dtype=np.float32)
    masks = np.empty((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        img, bits = make_blob_arrays(size, rng)
        images[i, 0] = img
        masks[i, 0] = bits
    return (
        torch.from_numpy(images).to(dtype),
        torch.from_numpy(masks).to(dtype),
        [SMOKE_CAPTION] * n,
    )


def _save_gray(arr01: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(arr01, 0.0, 1.0) * 255).round().astype(np.uint8), "L").save(path)


def build_blob_corpus(
    out_dir: str | Path, n: int, size: int = 8, seed: int = 0, split: str = "train"
) -> Manifest:
    """Write a blob corpus (images/, masks/, manifest.jsonl) rooted at out_dir."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        img, bits = make_blob_arrays(size, rng)
        name = f"blob{i:04d}"
        _save_gray(img, out_dir / "images" / f"{name}.png")
        mask_path = out_dir / "masks" / f"{name}.png"
        mask_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(bits * np.uint8(255), "L").save(mask_path)
        records.append(
            SmokeSample(
                id=name,
                image_path=f"images/{name}.png",
                mask_path=f"masks/{name}.png",
                caption=SMOKE_CAPTION,
                source="real",
                split=split,
            )
        )
    manifest = Manifest(records)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def build_background_corpus(
    out_dir: str | Path, n: int, size: int = 8, seed: int = 0, split: str = "train"
) -> Manifest:
    """Smoke-free dark backgrounds (no masks), usable as generation inputs or negatives."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        bg = 0.04 + 0.04 * rng.random()
        img = np.clip(
            np.full((size, size), bg, dtype=np.float32)
            + rng.normal(0.0, 0.01, size=(size, size)).astype(np.float32),
            0.0,
            1.0,
        )
        name = f"bg{i:04d}"
        _save_gray(img, out_dir / "images" / f"{name}.png")
        records.append(
            SmokeSample(
                id=name,
                image_path=f"images/{name}.png",
                caption=BACKGROUND_CAPTION,
                source="background",
                split=split,
            )
        )
    manifest = Manifest(records)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def make_mask_pool(n: int, size: int, seed: int = 0) -> list[BinaryMask]:
    rng = np.random.default_rng(seed)
    return [BinaryMask(make_blob_arrays(size, rng)[1]) for _ in range(n)]

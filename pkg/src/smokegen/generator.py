"""Batch smoke synthesis: rewrite captions to mention smoke, pair backgrounds
with random masks, sample under guidance, and recomposite the untouched
background outside the mask so unmasked pixels are byte-identical."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from PIL import Image

from .backbone import BackboneBundle, build_conditioning, uncond_like
from .corpus import BinaryMask, Manifest, SmokeSample, resize_mask, resolve_path, save_mask
from .diffusion import LatentBatch, NoiseSchedule, sample_cfg
from .injection import AdapterSet, InjectionSchedule, attach_adapters

SMOKE_LEXICON = ("smoke", "plume", "smoke plume", "wildfire smoke")


@dataclass(frozen=True)
class GenConfig:
    guidance_scale: float = 7.5
    steps: int = 50
    masks_per_background: int = 2
    samples_per_pair: int = 3
    seed: int = 0
    output_resolution: int | None = None

    def __post_init__(self):
        if self.steps < 1 or self.masks_per_background < 0 or self.samples_per_pair < 1:
            raise ValueError("counts must be positive (masks_per_background may be 0)")


class RewriteClient(Protocol):
    def rewrite(self, caption: str) -> str: ...


def mentions_smoke(caption: str, lexicon=SMOKE_LEXICON) -> bool:
    lower = caption.lower()
    return any(term in lower for term in lexicon)


def rewrite_caption(
    caption: str,
    client: RewriteClient | None = None,
    lexicon=SMOKE_LEXICON,
    template: str = "{caption} with smoke",
    retries: int = 2,
) -> str:
    """Make a caption smoke-inclusive; offline template fallback is deterministic."""
    if not caption:
        raise ValueError("caption must be non-empty")
    if mentions_smoke(caption, lexicon):
        return caption
    if client is not None:
        for _ in range(retries):
            out = client.rewrite(caption)
            if out and mentions_smoke(out, lexicon):
                return out
    return template.format(caption=caption)


@dataclass(frozen=True)
class GenPair:
    background: SmokeSample
    mask: BinaryMask
    mask_index: int
    pair_index: int


def pair_masks(
    backgrounds: Manifest,
    mask_pool: list[BinaryMask],
    cfg: GenConfig,
    rng: np.random.Generator,
    root: str | Path | None = None,
) -> list[GenPair]:
    """masks_per_background random masks per background, resized to its frame.

    Sampling is without replacement per background whenever the pool permits.
    """
    if not mask_pool:
        raise ValueError("mask pool is empty")
    pairs: list[GenPair] = []
    k = cfg.masks_per_background
    for record in backgrounds:
        with Image.open(resolve_path(root, record.image_path)) as img:
            width, height = img.size
        replace = k > len(mask_pool)
        chosen = rng.choice(len(mask_pool), size=k, replace=replace)
        for j, mask_idx in enumerate(chosen):
            mask = mask_pool[int(mask_idx)]
            if (mask.width, mask.height) != (width, height):
                mask = resize_mask(mask, width, height)
            pairs.append(GenPair(record, mask, j, len(pairs)))
    return pairs


def derive_seed(base_seed: int, pair_index: int, sample_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, pair_index, sample_index]).generate_state(1)[0])


def _load_uint8(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img)


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(arr.astype(np.float32) / 255.0)
    if t.dim() == 2:
        t = t[None]
    else:
        t = t.permute(2, 0, 1)
    return t[None]


def _to_uint8(decoded: torch.Tensor) -> np.ndarray:
    arr = decoded.clamp(0.0, 1.0).mul(255.0).round().byte().numpy()
    if arr.shape[0] == 1:
        return arr[0]
    return np.moveaxis(arr, 0, -1)


def _composite(generated: np.ndarray, background: np.ndarray, bits: np.ndarray) -> np.ndarray:
    mask = bits if background.ndim == 2 else bits[..., None]
    return np.where(mask == 1, generated, background)


def generate_batch(
    pairs: list[GenPair],
    adapters: AdapterSet,
    injection_schedule: InjectionSchedule,
    bundle: BackboneBundle,
    noise_schedule: NoiseSchedule,
    cfg: GenConfig,
    out_dir: str | Path,
    rewrite_client: RewriteClient | None = None,
    root: str | Path | None = None,
) -> Manifest:
    """samples_per_pair guided samples per (background, mask) pair.

    Unmasked pixels of every output are pasted back from the source
    background. Per-sample failures are quarantined and the batch continues.
    """
    registry = {tp.tap_id: tp for tp in bundle.denoiser.tap_points}
    for tap_id in injection_schedule.active_taps():
        if tap_id not in registry:
            raise ValueError(f"checkpoint schedule names tap {tap_id} absent from the backbone")
        if adapters.tap(tap_id).tap_channels != registry[tap_id].channels:
            raise ValueError(
                f"tap {tap_id}: adapter width {adapters.tap(tap_id).tap_channels} "
                f"!= backbone width {registry[tap_id].channels}"
            )
    adapted = attach_adapters(bundle.denoiser, injection_schedule, adapters)

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    records: list[SmokeSample] = []
    quarantined: list[dict] = []

    for pair in pairs:
        sample_ids = [
            f"{pair.background.id}-m{pair.mask_index}-s{s}" for s in range(cfg.samples_per_pair)
        ]
        try:
            bg_arr = _load_uint8(resolve_path(root, pair.background.image_path))
            mask = pair.mask
            if cfg.output_resolution is not None:
                side = cfg.output_resolution
                if bg_arr.shape[:2] != (side, side):
                    with Image.open(resolve_path(root, pair.background.image_path)) as img:
                        bg_arr = np.asarray(img.resize((side, side), Image.BILINEAR))
                    mask = resize_mask(mask, side, side)
            if (mask.height, mask.width) != bg_arr.shape[:2]:
                raise ValueError("pair mask does not match the background frame")
            images = _to_tensor(bg_arr)
            masks = torch.from_numpy(mask.bits.astype(np.float32))[None, None]
            caption = rewrite_caption(pair.background.caption, rewrite_client)
            _, cond = build_conditioning(images, masks, [caption], bundle)
            uncond = uncond_like(cond, bundle)
        except Exception as exc:
            quarantined.extend({"id": sid, "reason": str(exc)} for sid in sample_ids)
            continue
        for s, sid in enumerate(sample_ids):
            try:
                seed = derive_seed(cfg.seed, pair.pair_index, s)
                latents = sample_cfg(
                    adapted,
                    cond,
                    uncond,
                    noise_schedule,
                    steps=cfg.steps,
                    guidance=cfg.guidance_scale,
                    seed=seed,
                )
                decoded = bundle.autoencoder.decode(LatentBatch(latents))[0]
                out_arr = _composite(_to_uint8(decoded), bg_arr, mask.bits)
                mode = "L" if out_arr.ndim == 2 else "RGB"
                Image.fromarray(out_arr, mode).save(out_dir / "images" / f"{sid}.png")
                save_mask(mask, out_dir / "masks" / f"{sid}.png")
                records.append(
                    SmokeSample(
                        id=sid,
                        image_path=f"images/{sid}.png",
                        mask_path=f"masks/{sid}.png",
                        caption=caption,
                        source="synthetic",
                        split="train",
                    )
                )
            except Exception as exc:
                quarantined.append({"id": sid, "reason": str(exc)})

    manifest = Manifest(records)
    manifest.save(out_dir / "manifest.jsonl")
    with open(out_dir / "quarantine.jsonl", "w", encoding="utf-8") as fh:
        for row in quarantined:
            fh.write(json.dumps(row) + "\n")
    return manifest

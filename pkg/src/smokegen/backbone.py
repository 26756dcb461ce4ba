"""Assembly of the generative stack (denoiser, autoencoder, text encoder,
feature extractor) and the toy instantiation used by tests and the CLI demo.

The toy backbone is briefly warmed up on the blob task before freezing, so it
plays the part of a pretrained inpainting model that the adapters then steer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffusion import (
    ConditioningBundle,
    NoiseSchedule,
    ToyAutoencoder,
    ToyDenoiser,
    ToyTextEncoder,
    add_noise,
    base_loss,
    make_linear_schedule,
)
from .injection import ToyFeatureExtractor, extract_features_batch
from .toydata import make_blob_batch


@dataclass
class BackboneBundle:
    """The four frozen components the adapters are trained against."""

    denoiser: nn.Module
    autoencoder: nn.Module
    text_encoder: nn.Module
    extractor: nn.Module

    def named_components(self) -> dict[str, nn.Module]:
        return {
            "denoiser": self.denoiser,
            "autoencoder": self.autoencoder,
            "text_encoder": self.text_encoder,
            "extractor": self.extractor,
        }

    def freeze(self) -> None:
        for module in self.named_components().values():
            for p in module.parameters():
                p.requires_grad_(False)


def build_conditioning(
    images: torch.Tensor,
    masks: torch.Tensor,
    captions: list[str],
    bundle: BackboneBundle,
    with_features: bool = True,
) -> tuple[torch.Tensor, ConditioningBundle]:
    """Latents plus the full conditioning for one batch.

    `images` are (B, C, H, W) floats in [0, 1]; `masks` are (B, 1, H, W) with
    values in {0, 1}. The masked image zeroes the mask region.
    """
    if images.dim() != 4 or masks.dim() != 4:
        raise ValueError("images and masks must be 4-D batches")
    if images.shape[-2:] != masks.shape[-2:]:
        raise ValueError("images and masks must share pixel dimensions")
    x0 = bundle.autoencoder.encode(images).data
    masked = images * (1.0 - masks.to(images.dtype))
    mi_latent = bundle.autoencoder.encode(masked)
    f = bundle.autoencoder.downsample_factor
    mask_latent = masks[:, :, ::f, ::f].to(images.dtype)
    text = bundle.text_encoder.embed(captions).to(images.dtype)
    features = (
        extract_features_batch(masks, masked, bundle.extractor) if with_features else None
    )
    cond = ConditioningBundle(text, mask_latent, mi_latent, features)
    return x0, cond


def uncond_like(cond: ConditioningBundle, bundle: BackboneBundle) -> ConditioningBundle:
    """The guidance-free branch: empty-prompt embedding, image conditions kept."""
    batch = cond.text_embedding.shape[0]
    return ConditioningBundle(
        bundle.text_encoder.empty(batch).to(cond.text_embedding.dtype),
        cond.mask_latent,
        cond.masked_image_latent,
        cond.feature_bundle,
    )


def build_toy_backbone(
    seed: int = 0,
    latent_size: int = 8,
    latent_channels: int = 1,
    width: int = 16,
    text_dim: int = 16,
    extractor_size: int = 32,
    downsample_factor: int = 1,
) -> BackboneBundle:
    return BackboneBundle(
        denoiser=ToyDenoiser(
            latent_channels=latent_channels,
            latent_size=latent_size,
            width=width,
            text_dim=text_dim,
            seed=seed,
        ),
        autoencoder=ToyAutoencoder(downsample_factor),
        text_encoder=ToyTextEncoder(embed_dim=text_dim, seed=seed + 1),
        extractor=ToyFeatureExtractor(input_size=extractor_size, seed=seed + 2),
    )


def pretrain_toy_denoiser(
    bundle: BackboneBundle,
    sched: NoiseSchedule,
    steps: int = 400,
    batch_size: int = 16,
    lr: float = 2e-3,
    seed: int = 0,
    caption_dropout: float = 0.2,
    clip_norm: float = 1.0,
) -> list[float]:
    """Warm up the raw toy denoiser (no adapters) on the blob task with the
    plain denoising objective; returns the per-step losses.

    Caption dropout teaches the empty-prompt branch, as a pretrained
    text-conditional backbone would already know it; adapter training later
    applies no dropout.
    """
    f = bundle.autoencoder.downsample_factor
    denoiser = bundle.denoiser
    size = denoiser.latent_size * f
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(denoiser.parameters(), lr=lr)
    losses: list[float] = []
    for _ in range(steps):
        images, masks, captions = make_blob_batch(batch_size, size, rng)
        captions = ["" if rng.random() < caption_dropout else c for c in captions]
        x0, cond = build_conditioning(images, masks, captions, bundle, with_features=False)
        t = torch.randint(1, sched.T + 1, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        x_t = add_noise(x0, eps, t, sched)
        loss = base_loss(eps, denoiser.predict(x_t, t, cond))
        opt.zero_grad()
        loss.backward()
        if clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(denoiser.parameters(), clip_norm)
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def build_pretrained_toy(
    seed: int = 0,
    latent_size: int = 8,
    T: int = 100,
    pretrain_steps: int = 400,
    **kwargs,
) -> tuple[BackboneBundle, NoiseSchedule]:
    """Toy backbone warmed up on blobs, then frozen, plus its noise schedule."""
    bundle = build_toy_backbone(seed=seed, latent_size=latent_size, **kwargs)
    sched = make_linear_schedule(T)
    if pretrain_steps > 0:
        pretrain_toy_denoiser(bundle, sched, steps=pretrain_steps, seed=seed)
    bundle.freeze()
    return bundle, sched

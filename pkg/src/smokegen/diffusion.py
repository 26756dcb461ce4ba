"""Noise schedules, forward/reverse diffusion steps, the guided sampling loop,
and CPU-sized toy stand-ins for the denoiser, autoencoder, and text encoder.

The reverse step is the deterministic form: from a noised latent and a noise
prediction it reconstructs the previous step exactly, so chaining it against
the forward noising of the same noise is an algebraic identity. The sampler
walks a uniformly strided subsequence of steps from T down to 1 and finishes
with a projection onto the clean-signal estimate.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

if TYPE_CHECKING:
    from .injection import FeatureBundle

SPACES = ("pixel", "latent")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step cumulative signal coefficients, index base 1: alpha[t-1] is step t."""

    alpha: torch.Tensor

    def __post_init__(self):
        alpha = torch.as_tensor(self.alpha, dtype=torch.float64)
        if alpha.dim() != 1 or alpha.numel() < 1:
            raise ValueError("alpha must be a non-empty 1-D sequence")
        if alpha[0] > 1.0 or alpha[-1] <= 0.0:
            raise ValueError("alpha must start <= 1 and stay positive")
        if (alpha[1:] > alpha[:-1]).any():
            raise ValueError("alpha must be monotone non-increasing")
        object.__setattr__(self, "alpha", alpha)

    @property
    def T(self) -> int:
        return self.alpha.numel()

    def alpha_at(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 1).any() or (t > self.T).any():
            raise ValueError(f"step t={t} out of range [1, {self.T}]")
        return self.alpha[t - 1]

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "alpha": self.alpha.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        obj = json.loads(text)
        sched = cls(torch.tensor(obj["alpha"], dtype=torch.float64))
        if sched.T != obj["T"]:
            raise ValueError("schedule length does not match its declared T")
        return sched


def make_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, ref_steps: int = 1000
) -> NoiseSchedule:
    """Linear per-step noise rates, rescaled so the endpoint noise level is
    roughly independent of T."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    scale = ref_steps / T
    betas = np.linspace(beta_start * scale, beta_end * scale, T)
    betas = np.clip(betas, 1e-8, 0.999)
    alpha = np.cumprod(1.0 - betas)
    return NoiseSchedule(torch.from_numpy(alpha))


def make_cosine_schedule(T: int, s: float = 0.008, floor: float = 1e-5) -> NoiseSchedule:
    """Squared-cosine signal decay with a small positive floor."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    t = np.arange(1, T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2
    f0 = math.cos((s / (1 + s)) * math.pi / 2) ** 2
    alpha = np.clip(f / f0, floor, 1.0)
    alpha = np.minimum.accumulate(alpha)
    return NoiseSchedule(torch.from_numpy(alpha))


def _alpha_coeff(sched: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """Alpha at t shaped to broadcast over a (B, C, H, W) batch."""
    a = sched.alpha_at(t)
    if a.dim() == 0:
        return a
    if a.numel() != like.shape[0]:
        raise ValueError(f"per-sample t has {a.numel()} entries for batch {like.shape[0]}")
    return a.view(-1, 1, 1, 1)


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Noised latent at step t: sqrt(alpha_t)*x0 + sqrt(1-alpha_t)*eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    a = _alpha_coeff(sched, t, x0)
    return torch.sqrt(a).to(x0.dtype) * x0 + torch.sqrt(1.0 - a).to(x0.dtype) * eps


def ddim_step(
    x_t: torch.Tensor, eps_pred: torch.Tensor, alpha_t: float, alpha_prev: float
) -> torch.Tensor:
    """Deterministic reverse update between two signal levels."""
    if alpha_t == 0.0:
        raise ValueError("alpha_t = 0 makes the reverse step singular")
    a_t = torch.as_tensor(alpha_t, dtype=torch.float64)
    a_p = torch.as_tensor(alpha_prev, dtype=torch.float64)
    c1 = torch.sqrt(a_p / a_t).to(x_t.dtype)
    c2 = (torch.sqrt(a_p) * (torch.sqrt(1.0 / a_p - 1.0) - torch.sqrt(1.0 / a_t - 1.0))).to(
        x_t.dtype
    )
    return c1 * x_t + c2 * eps_pred


def reverse_step(
    x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, sched: NoiseSchedule
) -> torch.Tensor:
    """One deterministic step from t to t-1."""
    if x_t.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {tuple(x_t.shape)} vs {tuple(eps_pred.shape)}")
    if not 2 <= int(t) <= sched.T:
        raise ValueError(f"step t={t} out of range [2, {sched.T}]")
    a_t = float(sched.alpha_at(int(t)))
    a_prev = float(sched.alpha_at(int(t) - 1))
    return ddim_step(x_t, eps_pred, a_t, a_prev)


def base_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if eps.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_pred.shape)}")
    return torch.mean((eps - eps_pred) ** 2)


@dataclass
class LatentBatch:
    """A (B, C, H, W) grid tagged with the space it lives in."""

    data: torch.Tensor
    space: str = "latent"

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ValueError(f"expected a 4-D batch, got shape {tuple(self.data.shape)}")
        if self.space not in SPACES:
            raise ValueError(f"space must be one of {SPACES}, got {self.space!r}")


@dataclass
class ConditioningBundle:
    """Everything that steers one denoising batch: text, mask, masked image, features."""

    text_embedding: torch.Tensor  # (B, L, E)
    mask_latent: torch.Tensor  # (B, 1, h, w), binary values
    masked_image_latent: LatentBatch
    feature_bundle: "FeatureBundle | None" = None


@dataclass(frozen=True)
class TapPoint:
    """A declared interception point in the denoiser, with its activation geometry."""

    tap_id: int
    channels: int
    height: int
    width: int


@runtime_checkable
class Denoiser(Protocol):
    tap_points: Sequence[TapPoint]

    def predict(
        self, x_t: torch.Tensor, t, cond: ConditioningBundle, tap_hooks=None
    ) -> torch.Tensor: ...


def sampling_steps(T: int, steps: int) -> list[int]:
    """Uniformly strided decreasing step subsequence including T and 1."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    seq = np.round(np.linspace(T, 1, steps)).astype(int)
    out: list[int] = []
    for v in seq:
        if not out or v != out[-1]:
            out.append(int(v))
    return out


def sample_cfg(
    denoiser: Denoiser,
    cond: ConditioningBundle,
    uncond: ConditioningBundle,
    sched: NoiseSchedule,
    steps: int = 50,
    guidance: float = 7.5,
    seed: int = 0,
    x_init: torch.Tensor | None = None,
) -> torch.Tensor:
    """Classifier-free-guided deterministic sampling from seeded Gaussian noise.

    The guided prediction is e_uncond + guidance * (e_cond - e_uncond); the
    endpoints guidance=0 and guidance=1 collapse to the single-branch
    trajectories exactly.
    """
    ref = cond.masked_image_latent.data
    if x_init is None:
        gen = torch.Generator(device="cpu").manual_seed(int(seed))
        x = torch.randn(ref.shape, generator=gen, dtype=ref.dtype)
    else:
        x = x_init.clone()
    ts = sampling_steps(sched.T, steps)
    with torch.no_grad():
        for i, t in enumerate(ts):
            try:
                if guidance == 0.0:
                    e = denoiser.predict(x, t, uncond)
                elif guidance == 1.0:
                    e = denoiser.predict(x, t, cond)
                else:
                    e_c = denoiser.predict(x, t, cond)
                    e_u = denoiser.predict(x, t, uncond)
                    e = e_u + guidance * (e_c - e_u)
            except Exception as exc:
                raise RuntimeError(
                    f"denoiser failed at step t={t} ({i + 1}/{len(ts)})"
                ) from exc
            a_t = float(sched.alpha_at(t))
            a_prev = float(sched.alpha_at(ts[i + 1])) if i + 1 < len(ts) else 1.0
            x = ddim_step(x, e, a_t, a_prev)
    return x


def _sinusoidal_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(1000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _Stage(nn.Module):
    """Conv stage with feature-wise conditioning; optional 2x down/up resampling."""

    def __init__(self, in_ch: int, out_ch: int, resample: str | None, cond_dim: int):
        super().__init__()
        self.resample = resample
        stride = 2 if resample == "down" else 1
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.film = nn.Linear(cond_dim, 2 * out_ch)

    def forward(self, h: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if self.resample == "up":
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv(h)
        scale, shift = self.film(c).chunk(2, dim=-1)
        h = h * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        return F.gelu(h)


class ToyDenoiser(nn.Module):
    """Nine-stage conv denoiser over small latents with one tap after each stage.

    Stages 0-3 run high-to-low resolution, stage 4 is the bottleneck, stages
    5-8 mirror back up with skip connections from the matching-resolution
    down stages, and a gated input skip carries the noised latent to the
    output. Conditioning enters as concatenated mask / masked-image channels
    plus per-stage feature-wise modulation from the step index and pooled
    text embedding. Tap outputs feed both the next stage and the skip path.
    """

    def __init__(
        self,
        latent_channels: int = 1,
        latent_size: int = 8,
        width: int = 16,
        text_dim: int = 16,
        time_dim: int = 8,
        cond_dim: int = 32,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if latent_size % 4 != 0:
            raise ValueError("latent_size must be divisible by 4 (two downsamples)")
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        w1, w2, w3 = width, width * 3 // 2, width * 2
        # (in_ch, out_ch, resample); stage 6 consumes tap-3 skips, stage 8 tap-1 skips
        plan = [
            (2 * latent_channels + 1, w1, None),
            (w1, w1, None),
            (w1, w2, "down"),
            (w2, w2, None),
            (w2, w3, "down"),
            (w3, w2, "up"),
            (w2 + w2, w2, None),
            (w2, w1, "up"),
            (w1 + w1, w1, None),
        ]
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.cond_mlp = nn.Sequential(
                nn.Linear(time_dim + text_dim, cond_dim),
                nn.GELU(),
                nn.Linear(cond_dim, cond_dim),
            )
            self.stages = nn.ModuleList(
                _Stage(i, o, r, cond_dim) for i, o, r in plan
            )
            self.out = nn.Conv2d(w1, latent_channels, 3, padding=1)
            self.skip_gate = nn.Parameter(torch.ones(()))
        self.time_dim = time_dim
        self.text_dim = text_dim
        size = latent_size
        self.tap_points: list[TapPoint] = []
        for i, (_, out_ch, resample) in enumerate(plan):
            if resample == "down":
                size //= 2
            elif resample == "up":
                size *= 2
            self.tap_points.append(TapPoint(i, out_ch, size, size))
        self.to(dtype)

    def predict(
        self, x_t: torch.Tensor, t, cond: ConditioningBundle, tap_hooks=None
    ) -> torch.Tensor:
        b = x_t.shape[0]
        t_vec = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1)
        if t_vec.numel() == 1:
            t_vec = t_vec.expand(b)
        text = cond.text_embedding.mean(dim=1).to(x_t.dtype)
        c = self.cond_mlp(torch.cat([_sinusoidal_features(t_vec, self.time_dim), text], dim=-1))
        h = torch.cat(
            [x_t, cond.mask_latent.to(x_t.dtype), cond.masked_image_latent.data.to(x_t.dtype)],
            dim=1,
        )
        taps: dict[int, torch.Tensor] = {}
        skip_from = {6: 3, 8: 1}
        for i, stage in enumerate(self.stages):
            if i in skip_from:
                h = torch.cat([h, taps[skip_from[i]]], dim=1)
            h = stage(h, c)
            if tap_hooks is not None and i in tap_hooks:
                h = tap_hooks[i](h)
            taps[i] = h
        return self.out(h) + self.skip_gate * x_t

    forward = predict


class ToyAutoencoder(nn.Module):
    """Identity latent map at factor 1; average-pool / nearest-upsample at factor n."""

    def __init__(self, downsample_factor: int = 1):
        super().__init__()
        if downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        self.downsample_factor = downsample_factor

    def encode(self, images: torch.Tensor) -> LatentBatch:
        if images.dim() != 4:
            raise ValueError("expected (B, C, H, W) images")
        f = self.downsample_factor
        if f == 1:
            return LatentBatch(images, "latent")
        if images.shape[-2] % f or images.shape[-1] % f:
            raise ValueError(f"image dims must be divisible by factor {f}")
        return LatentBatch(F.avg_pool2d(images, f), "latent")

    def decode(self, latents: LatentBatch | torch.Tensor) -> torch.Tensor:
        data = latents.data if isinstance(latents, LatentBatch) else latents
        f = self.downsample_factor
        if f == 1:
            return data
        return F.interpolate(data, scale_factor=f, mode="nearest")


class ToyTextEncoder(nn.Module):
    """Deterministic hashed-token embedder; the empty prompt embeds to zeros."""

    def __init__(self, embed_dim: int = 16, max_len: int = 8, vocab: int = 512, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.table = nn.Embedding(vocab, embed_dim)
        self.embed_dim = embed_dim
        self.max_len = max_len
        self.vocab = vocab

    def embed(self, captions: list[str]) -> torch.Tensor:
        out = torch.zeros(len(captions), self.max_len, self.embed_dim)
        for i, caption in enumerate(captions):
            tokens = caption.split()[: self.max_len]
            for j, tok in enumerate(tokens):
                idx = zlib.crc32(tok.lower().encode("utf-8")) % self.vocab
                out[i, j] = self.table.weight[idx]
        return out

    def empty(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.max_len, self.embed_dim)

"""Feature-injection adapters for a frozen denoiser.

A convolutional extractor turns the mask (channel-tripled) and the masked
image into pre-pooling feature grids. Per tap, the features are projected to
the attention width, attended against the tap's activation tokens, and folded
back through a residual MLP, so a zero-initialized adapter leaves the backbone
untouched. Taps carrying both streams share the query projection and
concatenate the two attention outputs before the MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import BinaryMask
from .diffusion import ConditioningBundle, Denoiser, TapPoint

ROLES = ("masked_image", "mask", "both", "none")


@dataclass
class FeatureBundle:
    """Extractor outputs for one batch: mask features and masked-image features."""

    f_mask: torch.Tensor  # (B, C1, H1, W1)
    f_image: torch.Tensor  # (B, C1, H1, W1)

    def __post_init__(self):
        if self.f_mask.shape != self.f_image.shape:
            raise ValueError(
                f"feature shapes differ: {tuple(self.f_mask.shape)} vs {tuple(self.f_image.shape)}"
            )
        if self.f_mask.dim() != 4:
            raise ValueError("features must be (B, C1, H1, W1) grids")
        if not (torch.isfinite(self.f_mask).all() and torch.isfinite(self.f_image).all()):
            raise ValueError("feature grids must be finite")


@dataclass(frozen=True)
class InjectionSchedule:
    """Map from tap id to the feature role injected there."""

    assignment: dict[int, str]

    def __post_init__(self):
        if not self.assignment:
            raise ValueError("schedule must cover at least one tap")
        for tap_id, role in self.assignment.items():
            if role not in ROLES:
                raise ValueError(f"tap {tap_id}: unknown role {role!r}")

    def role(self, tap_id: int) -> str:
        return self.assignment.get(tap_id, "none")

    def active_taps(self) -> list[int]:
        return sorted(t for t, r in self.assignment.items() if r != "none")

    def to_jsonable(self) -> dict[str, str]:
        return {str(t): r for t, r in sorted(self.assignment.items())}

    @classmethod
    def from_jsonable(cls, obj: dict) -> "InjectionSchedule":
        return cls({int(t): r for t, r in obj.items()})


def default_schedule() -> InjectionSchedule:
    """Reference nine-tap assignment: masked image at the outermost taps, both
    streams at the inner high/low transition taps, mask only at the middle."""
    assignment = {i: "none" for i in range(9)}
    assignment[0] = "masked_image"
    assignment[1] = "both"
    assignment[4] = "mask"
    assignment[7] = "both"
    assignment[8] = "masked_image"
    return InjectionSchedule(assignment)


def flatten_tokens(grid: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C) in row-major spatial order."""
    return grid.flatten(2).transpose(1, 2)


def unflatten_tokens(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    b, n, c = tokens.shape
    if n != height * width:
        raise ValueError(f"{n} tokens cannot fill a {height}x{width} grid")
    return tokens.transpose(1, 2).reshape(b, c, height, width)


def project_features(f: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
    """Per-position linear map of a feature grid into (B, H1*W1, d) tokens."""
    squeeze = f.dim() == 3
    if squeeze:
        f = f[None]
    if f.shape[1] != proj.in_features:
        raise ValueError(
            f"projection expects {proj.in_features} channels, feature grid has {f.shape[1]}"
        )
    tokens = proj(flatten_tokens(f))
    return tokens[0] if squeeze else tokens


def attention(
    x_tokens: torch.Tensor,
    f_tokens: torch.Tensor,
    w_q: nn.Linear,
    w_k: nn.Linear,
    w_v: nn.Linear,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention of tap tokens over feature tokens.

    Returns (values, weights); weight rows sum to 1.
    """
    d = w_q.out_features
    if d <= 0:
        raise ValueError("attention width must be positive")
    q = w_q(x_tokens)
    k = w_k(f_tokens)
    v = w_v(f_tokens)
    logits = q @ k.transpose(-1, -2) / math.sqrt(d)
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


def cross_attend(
    x: torch.Tensor,
    f_tokens: torch.Tensor,
    w_q: nn.Linear,
    w_k: nn.Linear,
    w_v: nn.Linear,
    mlp: nn.Module,
) -> torch.Tensor:
    """Single-stream fusion: x + MLP(attention(x, f)) reshaped to the tap grid."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
        f_tokens = f_tokens[None] if f_tokens.dim() == 2 else f_tokens
    _, _, h, w = x.shape
    z, _ = attention(flatten_tokens(x), f_tokens, w_q, w_k, w_v)
    out = x + unflatten_tokens(mlp(z), h, w)
    return out[0] if squeeze else out


def joint_cross_attend(
    x: torch.Tensor,
    f_mask_tokens: torch.Tensor,
    f_image_tokens: torch.Tensor,
    w_q: nn.Linear,
    mask_k: nn.Linear,
    mask_v: nn.Linear,
    image_k: nn.Linear,
    image_v: nn.Linear,
    mlp: nn.Module,
) -> torch.Tensor:
    """Two-stream fusion with a shared query: x + MLP(concat(Z1, Z2))."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x[None]
        f_mask_tokens = f_mask_tokens[None] if f_mask_tokens.dim() == 2 else f_mask_tokens
        f_image_tokens = f_image_tokens[None] if f_image_tokens.dim() == 2 else f_image_tokens
    if f_mask_tokens.shape[-1] != f_image_tokens.shape[-1]:
        raise ValueError("both token streams must be projected to the same width")
    _, _, h, w = x.shape
    xt = flatten_tokens(x)
    z1, _ = attention(xt, f_mask_tokens, w_q, mask_k, mask_v)
    z2, _ = attention(xt, f_image_tokens, w_q, image_k, image_v)
    out = x + unflatten_tokens(mlp(torch.cat([z1, z2], dim=-1)), h, w)
    return out[0] if squeeze else out


class _Stream(nn.Module):
    """Per-stream parameters: feature projection plus key/value maps."""

    def __init__(self, feature_channels: int, d: int):
        super().__init__()
        self.proj = nn.Linear(feature_channels, d)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)

    def tokens(self, f_grid: torch.Tensor) -> torch.Tensor:
        return project_features(f_grid, self.proj)


class TapAdapter(nn.Module):
    """All parameters injected at one tap; role decides which streams exist."""

    def __init__(
        self,
        role: str,
        tap_channels: int,
        feature_channels: int,
        attn_dim: int | None = None,
        hidden: int | None = None,
        zero_init: bool = True,
    ):
        super().__init__()
        if role not in ROLES or role == "none":
            raise ValueError(f"adapter role must be an injecting role, got {role!r}")
        d = attn_dim if attn_dim is not None else tap_channels
        if d <= 0:
            raise ValueError("attention width must be positive")
        hidden = hidden if hidden is not None else tap_channels
        self.role = role
        self.tap_channels = tap_channels
        self.attn_dim = d
        self.hidden = hidden
        self.q = nn.Linear(tap_channels, d, bias=False)
        if role in ("mask", "both"):
            self.mask = _Stream(feature_channels, d)
        if role in ("masked_image", "both"):
            self.image = _Stream(feature_channels, d)
        in_width = 2 * d if role == "both" else d
        self.mlp = nn.Sequential(
            nn.Linear(in_width, hidden), nn.GELU(), nn.Linear(hidden, tap_channels)
        )
        if zero_init:
            nn.init.zeros_(self.mlp[-1].weight)
            nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, x: torch.Tensor, bundle: FeatureBundle) -> torch.Tensor:
        if self.role == "mask":
            return cross_attend(
                x, self.mask.tokens(bundle.f_mask), self.q, self.mask.k, self.mask.v, self.mlp
            )
        if self.role == "masked_image":
            return cross_attend(
                x, self.image.tokens(bundle.f_image), self.q, self.image.k, self.image.v, self.mlp
            )
        return joint_cross_attend(
            x,
            self.mask.tokens(bundle.f_mask),
            self.image.tokens(bundle.f_image),
            self.q,
            self.mask.k,
            self.mask.v,
            self.image.k,
            self.image.v,
            self.mlp,
        )


class AdapterSet(nn.Module):
    """Independent per-tap adapters keyed "tap{N}"; weights are never shared."""

    def __init__(self, taps: dict[int, TapAdapter], schedule: InjectionSchedule):
        super().__init__()
        self.taps = nn.ModuleDict({f"tap{i}": taps[i] for i in sorted(taps)})
        self.schedule = schedule

    @classmethod
    def build(
        cls,
        tap_points: Sequence[TapPoint],
        schedule: InjectionSchedule,
        feature_channels: int,
        attn_dim: int | None = None,
        hidden: int | None = None,
        zero_init: bool = True,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ) -> "AdapterSet":
        registry = {tp.tap_id: tp for tp in tap_points}
        unknown = [t for t in schedule.active_taps() if t not in registry]
        if unknown:
            raise ValueError(f"schedule names taps absent from the denoiser registry: {unknown}")
        taps: dict[int, TapAdapter] = {}
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            for tap_id in schedule.active_taps():
                taps[tap_id] = TapAdapter(
                    schedule.role(tap_id),
                    registry[tap_id].channels,
                    feature_channels,
                    attn_dim,
                    hidden,
                    zero_init,
                )
        out = cls(taps, schedule)
        return out.to(dtype)

    def tap(self, tap_id: int) -> TapAdapter:
        return self.taps[f"tap{tap_id}"]

    def geometry(self) -> dict[str, dict]:
        return {
            name: {
                "role": adapter.role,
                "tap_channels": adapter.tap_channels,
                "attn_dim": adapter.attn_dim,
                "hidden": adapter.hidden,
            }
            for name, adapter in self.taps.items()
        }


class AdaptedDenoiser(nn.Module):
    """A base denoiser with adapters intercepting its taps.

    Taps not named by the schedule pass through untouched; the adapted output
    feeds the next stage of the base network.
    """

    def __init__(self, base: Denoiser, schedule: InjectionSchedule, adapters: AdapterSet):
        super().__init__()
        registry = {tp.tap_id for tp in base.tap_points}
        missing = [t for t in schedule.active_taps() if t not in registry]
        if missing:
            raise ValueError(f"schedule names unknown taps {missing}; registry has {sorted(registry)}")
        self.base = base
        self.injection_schedule = schedule
        self.adapters = adapters
        self.tap_points = base.tap_points

    def predict(
        self, x_t: torch.Tensor, t, cond: ConditioningBundle, tap_hooks=None
    ) -> torch.Tensor:
        if tap_hooks is not None:
            raise ValueError("an adapted denoiser owns its tap hooks")
        active = self.injection_schedule.active_taps()
        if active and cond.feature_bundle is None:
            raise ValueError("conditioning lacks the feature bundle required for injection")
        hooks = {
            tap_id: (lambda h, a=self.adapters.tap(tap_id): a(h, cond.feature_bundle))
            for tap_id in active
        }
        return self.base.predict(x_t, t, cond, tap_hooks=hooks)

    forward = predict


def attach_adapters(
    denoiser: Denoiser, schedule: InjectionSchedule, adapters: AdapterSet
) -> AdaptedDenoiser:
    return AdaptedDenoiser(denoiser, schedule, adapters)


class FeatureExtractor(Protocol):
    input_size: int
    feature_channels: int

    def features(self, batch: torch.Tensor) -> torch.Tensor: ...


class ToyFeatureExtractor(nn.Module):
    """Two strided convs with fixed seed weights; pre-pooling geometry s/4 x s/4."""

    def __init__(self, input_size: int = 32, feature_channels: int = 16, seed: int = 0):
        super().__init__()
        if input_size % 4 != 0:
            raise ValueError("input_size must be divisible by 4")
        self.input_size = input_size
        self.feature_channels = feature_channels
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.conv1 = nn.Conv2d(3, 8, 3, stride=2, padding=1)
            self.conv2 = nn.Conv2d(8, feature_channels, 3, stride=2, padding=1)

    def features(self, batch: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.gelu(self.conv1(batch)))

    forward = features


class ResNet50Features(nn.Module):
    """Pre-pooling features of a 50-layer residual backbone: (B, 2048, 7, 7) at 224."""

    input_size = 224
    feature_channels = 2048

    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision import models

        weights = models.ResNet50_Weights.IMAGENET1K_V2 if pretrained else None
        body = models.resnet50(weights=weights)
        self.body = nn.Sequential(*list(body.children())[:-2])

    def features(self, batch: torch.Tensor) -> torch.Tensor:
        return self.body(batch)

    forward = features


def _to_chw(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        arr = image.float()
    else:
        arr = torch.from_numpy(np.asarray(image)).float()
        if arr.max() > 1.5:
            arr = arr / 255.0
    if arr.dim() == 2:
        arr = arr[None]
    elif arr.dim() == 3 and arr.shape[-1] in (1, 3):
        arr = arr.permute(2, 0, 1)
    return arr


def extract_features_batch(
    masks: torch.Tensor, masked_images: torch.Tensor, extractor: FeatureExtractor
) -> FeatureBundle:
    """Features for a batch: masks are channel-tripled and nearest-resized to
    stay binary; masked images are bilinearly resized."""
    size = extractor.input_size
    if masks.dim() != 4 or masks.shape[1] != 1:
        raise ValueError("masks must be (B, 1, H, W)")
    mask3 = masks.repeat(1, 3, 1, 1).float()
    if mask3.shape[-2:] != (size, size):
        mask3 = F.interpolate(mask3, size=(size, size), mode="nearest")
    img = masked_images.float()
    if img.shape[1] == 1:
        img = img.repeat(1, 3, 1, 1)
    if img.shape[-2:] != (size, size):
        img = F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)
    try:
        with torch.no_grad():
            f_m = extractor.features(mask3)
            f_i = extractor.features(img)
    except Exception as exc:
        from .errors import TransportError

        raise TransportError(f"feature extractor failed: {exc}") from exc
    return FeatureBundle(f_m, f_i)


def extract_features(
    mask: BinaryMask, masked_image: np.ndarray | torch.Tensor, extractor: FeatureExtractor
) -> FeatureBundle:
    """Single-sample convenience wrapper around extract_features_batch."""
    m = torch.from_numpy(mask.bits).float()[None, None]
    img = _to_chw(masked_image)[None]
    return extract_features_batch(m, img, extractor)


CHECKPOINT_VERSION = 1


def save_adapter_checkpoint(
    path: str | Path,
    adapters: AdapterSet,
    feature_channels: int,
    extra: dict | None = None,
) -> None:
    """Flat archive of named tensors keyed tap{N}.{stream}.{matrix} plus schedule."""
    params = {
        name.split(".", 1)[1]: tensor.clone()
        for name, tensor in adapters.state_dict().items()
    }
    payload = {
        "version": CHECKPOINT_VERSION,
        "schedule": adapters.schedule.to_jsonable(),
        "geometry": adapters.geometry(),
        "feature_channels": feature_channels,
        "params": params,
    }
    if extra:
        payload["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_adapter_checkpoint(path: str | Path) -> tuple[AdapterSet, InjectionSchedule, dict]:
    payload = torch.load(path, weights_only=False)
    if not isinstance(payload, dict) or "version" not in payload:
        raise ValueError(f"{path}: not an adapter checkpoint (missing version)")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload['version']}")
    schedule = InjectionSchedule.from_jsonable(payload["schedule"])
    taps: dict[int, TapAdapter] = {}
    for name, geo in payload["geometry"].items():
        tap_id = int(name.removeprefix("tap"))
        taps[tap_id] = TapAdapter(
            geo["role"],
            geo["tap_channels"],
            payload["feature_channels"],
            geo["attn_dim"],
            geo["hidden"],
            zero_init=False,
        )
    adapters = AdapterSet(taps, schedule)
    adapters.load_state_dict({f"taps.{k}": v for k, v in payload["params"].items()})
    return adapters, schedule, payload.get("extra", {})

"""Randomized mask perturbation and the weighted masked denoising objective.

Dilation and erosion are sliding-window max/min over a k×k square window with
the anchor at floor((k-1)/2). Out-of-image pixels count as 0 for dilation and
1 for erosion, so masks touching the frame edge never erode inward from the
frame. The perturbation draws up to three rounds of random dilate/erode with
kernel sizes in [10, 20], and the loss blends the perturbed-mask MSE term with
the plain MSE term by a weight omega.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .corpus import BinaryMask

MORPH_OPS = ("dilate", "erode")


@dataclass(frozen=True)
class MrdConfig:
    omega: float = 0.4
    kernel_min: int = 10
    kernel_max: int = 20
    max_rounds: int = 3
    fixed_rounds: bool = False
    # XOR of original and perturbed mask instead of the perturbed mask itself;
    # off by default, kept as a sensitivity-analysis variant.
    xor_difference: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")
        if self.kernel_min < 1 or self.kernel_min > self.kernel_max:
            raise ValueError(
                f"need 1 <= kernel_min <= kernel_max, got [{self.kernel_min}, {self.kernel_max}]"
            )
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "MrdConfig":
        return cls(**{k: obj[k] for k in obj})


@dataclass
class PerturbedMask:
    """A perturbed mask with the log of rounds that produced it."""

    bits: BinaryMask
    rounds: tuple[tuple[str, int], ...]
    source: BinaryMask

    def __post_init__(self):
        if not 1 <= len(self.rounds):
            raise ValueError("at least one perturbation round is required")
        if self.bits.bits.shape != self.source.bits.shape:
            raise ValueError("perturbed mask must keep the source dimensions")


def _slide(bits: np.ndarray, kernel: int, pad_value: int, take_max: bool) -> np.ndarray:
    """Separable sliding max/min over a kernel×kernel window, anchor floor((k-1)/2)."""
    before = (kernel - 1) // 2
    after = kernel - 1 - before
    out = bits
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (before, after)
        padded = np.pad(out, pad, constant_values=pad_value)
        windows = sliding_window_view(padded, kernel, axis=axis)
        out = windows.max(axis=-1) if take_max else windows.min(axis=-1)
    return out


def morph(mask: BinaryMask, op: str, kernel: int) -> BinaryMask:
    """Dilate (sliding max) or erode (sliding min) with a square window."""
    if kernel < 1:
        raise ValueError(f"kernel must be >= 1, got {kernel}")
    if op not in MORPH_OPS:
        raise ValueError(f"op must be one of {MORPH_OPS}, got {op!r}")
    if kernel == 1:
        return BinaryMask(mask.bits.copy())
    if op == "dilate":
        out = _slide(mask.bits, kernel, pad_value=0, take_max=True)
    else:
        out = _slide(mask.bits, kernel, pad_value=1, take_max=False)
    return BinaryMask(np.ascontiguousarray(out))


def perturb_mask(
    mask: BinaryMask, cfg: MrdConfig, rng: np.random.Generator
) -> PerturbedMask:
    """Apply 1..max_rounds random dilate/erode rounds; deterministic under a fixed rng."""
    if cfg.fixed_rounds:
        n_rounds = cfg.max_rounds
    else:
        n_rounds = int(rng.integers(1, cfg.max_rounds + 1))
    bits = mask
    rounds: list[tuple[str, int]] = []
    for _ in range(n_rounds):
        op = MORPH_OPS[int(rng.integers(0, 2))]
        kernel = int(rng.integers(cfg.kernel_min, cfg.kernel_max + 1))
        bits = morph(bits, op, kernel)
        rounds.append((op, kernel))
    if cfg.xor_difference:
        bits = BinaryMask(np.bitwise_xor(bits.bits, mask.bits))
    return PerturbedMask(bits=bits, rounds=tuple(rounds), source=mask)


def downsample_mask(mask: BinaryMask, factor: int) -> BinaryMask:
    """Nearest-neighbor subsampling at stride = factor (dims must divide evenly)."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return BinaryMask(mask.bits.copy())
    if mask.height % factor or mask.width % factor:
        raise ValueError(
            f"mask dims {mask.height}x{mask.width} not divisible by factor {factor}"
        )
    return BinaryMask(np.ascontiguousarray(mask.bits[::factor, ::factor]))


def mask_tensor(
    mask: BinaryMask | PerturbedMask,
    dtype: torch.dtype = torch.float32,
    device=None,
) -> torch.Tensor:
    """(1, 1, H, W) float tensor view of a mask, broadcastable over channels."""
    if isinstance(mask, PerturbedMask):
        mask = mask.bits
    arr = np.ascontiguousarray(mask.bits)
    return torch.from_numpy(arr).to(dtype=dtype, device=device)[None, None]


def _check_mask_shape(m: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if m.dim() == 2:
        m = m[None, None]
    elif m.dim() == 3:
        m = m[:, None]
    if m.shape[-2:] != like.shape[-2:]:
        raise ValueError(
            f"mask spatial dims {tuple(m.shape[-2:])} != latent dims {tuple(like.shape[-2:])}"
        )
    return m.to(dtype=like.dtype, device=like.device)


def mrd_terms(
    eps: torch.Tensor, eps_pred: torch.Tensor, m_prime: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(masked, plain) MSE terms; the masked term averages over ALL elements."""
    if eps.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_pred.shape)}")
    m = _check_mask_shape(m_prime, eps)
    masked = torch.mean((m * eps - m * eps_pred) ** 2)
    plain = torch.mean((eps - eps_pred) ** 2)
    return masked, plain


def total_loss(
    eps: torch.Tensor,
    eps_pred: torch.Tensor,
    m_prime: torch.Tensor,
    omega: float,
) -> torch.Tensor:
    """omega-weighted blend of the perturbed-mask MSE and the plain MSE.

    Written as plain + omega*(masked - plain) so the blend is exactly linear
    in omega and collapses bitwise to the plain term when omega is 0 or when
    the mask is all ones.
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    masked, plain = mrd_terms(eps, eps_pred, m_prime)
    return plain + omega * (masked - plain)

"""Image-quality and text-alignment metrics with a paired-report generator.

PSNR, SSIM, and MSE are computed natively in float64; perceptual and
text-alignment scores come from optional clients and are recorded as absent,
never zero-filled, when no client is wired in.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .corpus import Manifest, resolve_path

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse_img(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE); identical inputs give +inf."""
    err = mse_img(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def luminance(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[-1] == 3:
        return arr @ np.asarray(LUMA_WEIGHTS)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        return arr[..., 0]
    raise ValueError(f"cannot take luminance of shape {arr.shape}")


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    ax = np.arange(window, dtype=np.float64) - (window - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 8,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 255.0,
    gaussian: bool = False,
    sigma: float = 1.5,
) -> float:
    """Mean windowed structural similarity over luminance.

    Uniform window by default; a Gaussian-weighted variant is available for
    cross-checking against numbers published with that convention.
    """
    la, lb = _check_pair(luminance(a), luminance(b))
    h, w = la.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}-pixel window")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    weights = _gaussian_kernel(window, sigma) if gaussian else None

    wa = sliding_window_view(la, (window, window))
    wb = sliding_window_view(lb, (window, window))
    total = 0.0
    count = 0
    chunk = max(1, (1 << 22) // (wa.shape[1] * window * window))
    for r0 in range(0, wa.shape[0], chunk):
        blk_a = wa[r0 : r0 + chunk].astype(np.float64)
        blk_b = wb[r0 : r0 + chunk].astype(np.float64)
        if weights is None:
            mu_a = blk_a.mean(axis=(-1, -2))
            mu_b = blk_b.mean(axis=(-1, -2))
            var_a = (blk_a**2).mean(axis=(-1, -2)) - mu_a**2
            var_b = (blk_b**2).mean(axis=(-1, -2)) - mu_b**2
            cov = (blk_a * blk_b).mean(axis=(-1, -2)) - mu_a * mu_b
        else:
            mu_a = (blk_a * weights).sum(axis=(-1, -2))
            mu_b = (blk_b * weights).sum(axis=(-1, -2))
            var_a = (blk_a**2 * weights).sum(axis=(-1, -2)) - mu_a**2
            var_b = (blk_b**2 * weights).sum(axis=(-1, -2)) - mu_b**2
            cov = (blk_a * blk_b * weights).sum(axis=(-1, -2)) - mu_a * mu_b
        smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        )
        total += float(smap.sum())
        count += smap.size
    return total / count


class LpipsClient(Protocol):
    def distance(self, a: np.ndarray, b: np.ndarray) -> float: ...


class ClipClient(Protocol):
    def similarity(self, image: np.ndarray, text: str) -> float: ...


def lpips_score(a: np.ndarray, b: np.ndarray, client: LpipsClient | None) -> float | None:
    if client is None:
        return None
    value = float(client.distance(a, b))
    if value < 0:
        raise ValueError(f"perceptual distance must be non-negative, got {value}")
    return value


def clip_similarity(image: np.ndarray, text: str, client: ClipClient | None) -> float | None:
    if client is None:
        return None
    return float(client.similarity(image, text))


@dataclass
class EvalRow:
    id: str
    psnr: float
    ssim: float
    mse: float
    lpips: float | None = None
    clipsim: float | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow]
    aggregates: dict[str, float]
    coverage: dict[str, int]
    exclusions: list[str]
    config: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        def clean(v):
            if v is None:
                return None
            return "inf" if math.isinf(v) else v

        return {
            "rows": [
                {
                    "id": r.id,
                    "psnr": clean(r.psnr),
                    "ssim": r.ssim,
                    "mse": r.mse,
                    "lpips": clean(r.lpips),
                    "clipsim": clean(r.clipsim),
                }
                for r in self.rows
            ],
            "aggregates": self.aggregates,
            "coverage": self.coverage,
            "exclusions": self.exclusions,
            "config": self.config,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_jsonable(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "psnr", "ssim", "mse", "lpips", "clipsim"])
            for r in self.rows:
                writer.writerow([r.id, r.psnr, r.ssim, r.mse, r.lpips, r.clipsim])


def evaluate_pairs(
    generated: Manifest,
    reference: Manifest,
    root_generated: str | Path | None = None,
    root_reference: str | Path | None = None,
    lpips_client: LpipsClient | None = None,
    clip_client: ClipClient | None = None,
    window: int = 8,
    region: str = "full",
) -> EvalReport:
    """Per-id metric rows for id-aligned manifests plus finite-row means.

    Unmatched ids are listed and excluded; absent client metrics stay absent.
    region="masked" crops both images to the generated mask's bounding box
    before computing metrics (records without masks fall back to full frame).
    """
    if region not in ("full", "masked"):
        raise ValueError(f"region must be 'full' or 'masked', got {region!r}")
    ref_by_id = {r.id: r for r in reference.records}
    rows: list[EvalRow] = []
    exclusions: list[str] = []
    for rec in generated.records:
        if rec.id not in ref_by_id:
            exclusions.append(f"generated id {rec.id} missing from reference")
            continue
        with Image.open(resolve_path(root_generated, rec.image_path)) as img:
            a = np.asarray(img)
        with Image.open(resolve_path(root_reference, ref_by_id[rec.id].image_path)) as img:
            b = np.asarray(img)
        if region == "masked" and rec.mask_path is not None:
            from .corpus import largest_component_bbox, load_mask

            x0, y0, w, h = largest_component_bbox(
                load_mask(resolve_path(root_generated, rec.mask_path))
            )
            if min(w, h) >= window:
                a = a[y0 : y0 + h, x0 : x0 + w]
                b = b[y0 : y0 + h, x0 : x0 + w]
            else:
                exclusions.append(f"{rec.id}: mask crop {w}x{h} below the {window}px window, using full frame")
        rows.append(
            EvalRow(
                id=rec.id,
                psnr=psnr(a, b),
                ssim=ssim(a, b, window=window),
                mse=mse_img(a, b),
                lpips=lpips_score(a, b, lpips_client),
                clipsim=clip_similarity(a, rec.caption, clip_client),
            )
        )
    gen_ids = generated.ids()
    exclusions.extend(
        f"reference id {rid} missing from generated"
        for rid in sorted(ref_by_id.keys() - gen_ids)
    )

    aggregates: dict[str, float] = {}
    coverage: dict[str, int] = {}
    for metric in ("psnr", "ssim", "mse", "lpips", "clipsim"):
        values = [
            getattr(r, metric)
            for r in rows
            if getattr(r, metric) is not None and math.isfinite(getattr(r, metric))
        ]
        coverage[metric] = len(values)
        if values:
            aggregates[metric] = float(np.mean(values))
    return EvalReport(
        rows=rows,
        aggregates=aggregates,
        coverage=coverage,
        exclusions=exclusions,
        config={"window": window, "peak": 255.0, "region": region},
    )

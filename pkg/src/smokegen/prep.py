"""Training-corpus construction from an annotated detection dataset.

Segmentation and captioning models sit behind client interfaces; the mocks
used in tests keep the pipeline runnable offline. Failures are aggregated
into a quarantine sidecar, never silently dropped, and reruns skip ids that
are already in the output manifest.
"""

from __future__ import annotations

import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .corpus import (
    BinaryMask,
    DEFAULT_MASK_THRESHOLD,
    Manifest,
    SmokeSample,
    append_record,
    binarize_mask,
    resolve_path,
    save_mask,
)
from .errors import QuarantineError, TransportError


@dataclass(frozen=True)
class BBoxPrompt:
    """A pixel box from detection annotations, used to prompt segmentation."""

    image_id: str
    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0 or self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"invalid prompt box ({self.x0}, {self.y0}, {self.w}, {self.h})")


@dataclass(frozen=True)
class DetectionRecord:
    id: str
    image_path: str
    bboxes: tuple[tuple[int, int, int, int], ...]


def load_detection_manifest(path: str | Path) -> list[DetectionRecord]:
    """JSONL rows {id, image_path, bboxes: [{x0, y0, w, h}]}."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            boxes = tuple(
                (int(b["x0"]), int(b["y0"]), int(b["w"]), int(b["h"])) for b in obj["bboxes"]
            )
            records.append(DetectionRecord(obj["id"], obj["image_path"], boxes))
    return records


class SegmentationClient(Protocol):
    def segment(self, image: np.ndarray, prompt: BBoxPrompt) -> np.ndarray: ...


class CaptionClient(Protocol):
    def caption(self, image: np.ndarray, max_tokens: int) -> str: ...


class BoxFillSegmentation:
    """Mock: returns the prompt box filled solid."""

    def segment(self, image: np.ndarray, prompt: BBoxPrompt) -> np.ndarray:
        out = np.zeros(image.shape[:2], dtype=np.uint8)
        out[prompt.y0 : prompt.y0 + prompt.h, prompt.x0 : prompt.x0 + prompt.w] = 255
        return out


class ConstantCaption:
    """Mock: a fixed caption truncated to the token budget."""

    def __init__(self, text: str = "smoke rising over a forested hillside"):
        self.text = text

    def caption(self, image: np.ndarray, max_tokens: int) -> str:
        return " ".join(self.text.split()[:max_tokens])


def segment_smoke(
    image: np.ndarray,
    prompt: BBoxPrompt,
    client: SegmentationClient,
    threshold: float = DEFAULT_MASK_THRESHOLD,
) -> BinaryMask:
    """Binarized mask from the client; zero overlap with the prompt box quarantines."""
    height, width = image.shape[:2]
    if prompt.x0 + prompt.w > width or prompt.y0 + prompt.h > height:
        raise ValueError(f"prompt box exceeds the {width}x{height} image")
    try:
        raw = client.segment(image, prompt)
    except Exception as exc:
        raise TransportError(f"segmentation client failed: {exc}") from exc
    mask = binarize_mask(np.asarray(raw), threshold)
    if (mask.height, mask.width) != (height, width):
        raise ValueError(
            f"client mask {mask.width}x{mask.height} does not match the {width}x{height} image"
        )
    box = mask.bits[prompt.y0 : prompt.y0 + prompt.h, prompt.x0 : prompt.x0 + prompt.w]
    if box.sum() == 0:
        raise QuarantineError("segmented mask has no overlap with the prompt box")
    return mask


def _apply_stop_patterns(text: str, stop_patterns: tuple[str, ...]) -> str:
    for pattern in stop_patterns:
        text = re.sub(pattern, " ", text, flags=re.IGNORECASE)
    return " ".join(text.split())


def caption_image(
    image: np.ndarray,
    client: CaptionClient,
    max_tokens: int = 20,
    stop_patterns: tuple[str, ...] = (),
) -> str:
    """Non-empty caption within the token budget; one retry before quarantine."""
    last = ""
    for _ in range(2):
        try:
            text = client.caption(image, max_tokens)
        except Exception as exc:
            raise TransportError(f"caption client failed: {exc}") from exc
        last = _apply_stop_patterns(text or "", stop_patterns)
        if last:
            return last
    raise QuarantineError("caption empty after retry")


def build_training_set(
    detections: list[DetectionRecord] | str | Path,
    seg_client: SegmentationClient,
    cap_client: CaptionClient,
    out_dir: str | Path,
    root: str | Path | None = None,
    max_tokens: int = 20,
    stop_patterns: tuple[str, ...] = (),
    threshold: float = DEFAULT_MASK_THRESHOLD,
    workers: int = 1,
    transport_retries: int = 1,
    split: str = "train",
) -> Manifest:
    """One sample per (image, bbox) pair, resumable and quarantine-auditable."""
    if not isinstance(detections, list):
        detections = load_detection_manifest(detections)
    for record in detections:
        if not record.bboxes:
            raise ValueError(f"{record.id}: detection record has no bbox annotations")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    existing = Manifest.load(manifest_path).ids() if manifest_path.exists() else set()
    quarantine_path = out_dir / "quarantine.jsonl"

    def process(record: DetectionRecord):
        """Returns (new samples with their masks, quarantine rows) for one record."""
        samples: list[tuple[SmokeSample, BinaryMask]] = []
        failures: list[dict] = []
        sample_ids = [f"{record.id}-b{i}" for i in range(len(record.bboxes))]
        todo = [i for i, sid in enumerate(sample_ids) if sid not in existing]
        if not todo:
            return samples, failures
        image_path = resolve_path(root, record.image_path)
        with Image.open(image_path) as img:
            image = np.asarray(img)
        try:
            caption = caption_image(image, cap_client, max_tokens, stop_patterns)
        except (QuarantineError, TransportError) as exc:
            failures.extend(
                {"id": sample_ids[i], "reason": f"caption: {exc}", "timestamp": time.time()}
                for i in todo
            )
            return samples, failures
        for i in todo:
            x0, y0, w, h = record.bboxes[i]
            prompt = BBoxPrompt(record.id, x0, y0, w, h)
            mask = None
            reason = ""
            for _ in range(transport_retries + 1):
                try:
                    mask = segment_smoke(image, prompt, seg_client, threshold)
                    break
                except TransportError as exc:
                    reason = str(exc)
                except (QuarantineError, ValueError) as exc:
                    reason = str(exc)
                    break
            if mask is None:
                failures.append(
                    {"id": sample_ids[i], "reason": reason, "timestamp": time.time()}
                )
                continue
            sample = SmokeSample(
                id=sample_ids[i],
                image_path=str(image_path),
                mask_path=f"masks/{sample_ids[i]}.png",
                caption=caption,
                source="real",
                split=split,
            )
            samples.append((sample, mask))
        return samples, failures

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(process, detections))
    else:
        outcomes = [process(r) for r in detections]

    with open(quarantine_path, "a", encoding="utf-8") as qfh:
        for samples, failures in outcomes:
            for sample, mask in samples:
                save_mask(mask, out_dir / sample.mask_path)
                append_record(manifest_path, sample)
            for row in failures:
                qfh.write(json.dumps(row) + "\n")
    return Manifest.load(manifest_path)

"""Curation of generated candidates: three-axis scoring through a pluggable
multimodal client, weighted ranking, top-fraction selection, and assembly of
the human-annotation fine-tune file."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .corpus import Manifest, load_mask, resolve_path
from .errors import ScorerOutageError
from .mrd import morph

log = logging.getLogger(__name__)

WEIGHTS = (0.5, 0.3, 0.2)
SCORERS = ("human", "mllm", "mock")
DEFAULT_SCORING_PROMPT = (
    "Rate the smoke in this image on three 0-10 scales: color, visibility, "
    "and semi-transparency. Reply as JSON with keys color, visibility, "
    "semi_transparency."
)


def weighted_score(color: float, visibility: float, translucency: float) -> float:
    """0.5/0.3/0.2 weighting of the three component scores."""
    for name, value in (("color", color), ("visibility", visibility), ("translucency", translucency)):
        if not 0.0 <= value <= 10.0:
            raise ValueError(f"{name} score {value} outside [0, 10]")
    return WEIGHTS[0] * color + WEIGHTS[1] * visibility + WEIGHTS[2] * translucency


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    color: float
    visibility: float
    translucency: float
    weighted: float | None = None
    scorer: str = "mock"
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}, got {self.scorer!r}")
        expected = weighted_score(self.color, self.visibility, self.translucency)
        if self.weighted is None:
            object.__setattr__(self, "weighted", expected)
        elif abs(self.weighted - expected) > 1e-9:
            raise ValueError(
                f"{self.sample_id}: weighted {self.weighted} inconsistent with components"
            )
        object.__setattr__(self, "flags", tuple(self.flags))

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "color": self.color,
            "visibility": self.visibility,
            "translucency": self.translucency,
            "weighted": self.weighted,
            "scorer": self.scorer,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScoreRecord":
        return cls(
            sample_id=obj["sample_id"],
            color=obj["color"],
            visibility=obj["visibility"],
            translucency=obj["translucency"],
            weighted=obj.get("weighted"),
            scorer=obj.get("scorer", "mock"),
            flags=tuple(obj.get("flags", ())),
        )


def save_scores(records: list[ScoreRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        "".join(json.dumps(r.to_json()) + "\n" for r in records), encoding="utf-8"
    )


def load_scores(path: str | Path) -> list[ScoreRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(ScoreRecord.from_json(json.loads(line)))
    return out


class ScorerClient(Protocol):
    kind: str

    def score(
        self, image: np.ndarray, prompt: str, mask=None
    ) -> tuple[float, float, float]: ...


class MaskHeuristicScorer:
    """Deterministic offline stand-in so ranking logic is testable without a
    multimodal model; its judgments carry no claim of matching one."""

    kind = "mock"

    def score(self, image: np.ndarray, prompt: str, mask=None) -> tuple[float, float, float]:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr.mean(axis=-1)
        if mask is None or mask.foreground_count == 0:
            inside = arr
            outside = arr
            band = np.zeros_like(arr, dtype=bool)
        else:
            bits = mask.bits.astype(bool)
            inside = arr[bits]
            outside = arr[~bits] if (~bits).any() else arr
            band = (morph(mask, "dilate", 5).bits == 1) & (morph(mask, "erode", 5).bits == 0)
        color = 10.0 * max(0.0, 1.0 - abs(float(inside.mean()) - 200.0) / 200.0)
        contrast = abs(float(inside.mean()) - float(outside.mean())) / 255.0
        visibility = 10.0 * min(1.0, max(0.0, 2.0 * contrast))
        if band.any() and arr.var() > 0:
            ratio = float(arr[band].var()) / float(arr.var())
            translucency = 10.0 * min(1.0, ratio)
        else:
            translucency = 0.0
        return color, visibility, translucency


def _clamp_triple(
    triple: tuple[float, float, float]
) -> tuple[tuple[float, float, float], tuple[str, ...]]:
    names = ("color", "visibility", "translucency")
    values = []
    flags = []
    for name, value in zip(names, triple):
        clamped = min(10.0, max(0.0, float(value)))
        if clamped != value:
            flags.append(f"clamped:{name}")
        values.append(clamped)
    return (values[0], values[1], values[2]), tuple(flags)


def score_candidates(
    manifest: Manifest,
    scorer: ScorerClient,
    root: str | Path | None = None,
    workers: int = 1,
    out_path: str | Path | None = None,
    prompt: str = DEFAULT_SCORING_PROMPT,
    retries: int = 1,
    outage_limit: int = 5,
) -> list[ScoreRecord]:
    """One record per sample; per-sample failures retried then zero-defaulted
    with a quarantine flag; a persistent outage aborts with partials on disk."""

    def attempt(record) -> tuple[tuple[float, float, float] | None, str]:
        image = np.asarray(Image.open(resolve_path(root, record.image_path)))
        mask = load_mask(resolve_path(root, record.mask_path)) if record.mask_path else None
        err = ""
        for _ in range(retries + 1):
            try:
                return scorer.score(image, prompt, mask=mask), ""
            except Exception as exc:
                err = str(exc)
        return None, err

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(attempt, manifest.records))
    else:
        outcomes = [attempt(r) for r in manifest.records]

    out_file = None
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        out_file = open(out_path, "w", encoding="utf-8")
    records: list[ScoreRecord] = []
    consecutive = 0
    kind = getattr(scorer, "kind", "mllm")
    try:
        for record, (triple, err) in zip(manifest.records, outcomes):
            if triple is None:
                consecutive += 1
                values, flags = (0.0, 0.0, 0.0), (f"quarantined:{err[:120]}",)
            else:
                consecutive = 0
                values, flags = _clamp_triple(triple)
            score = ScoreRecord(record.id, *values, scorer=kind, flags=flags)
            records.append(score)
            if out_file is not None:
                out_file.write(json.dumps(score.to_json()) + "\n")
                out_file.flush()
            if triple is None and consecutive >= outage_limit:
                raise ScorerOutageError(
                    f"{consecutive} consecutive scorer failures (last: {err}); "
                    f"partial results retained"
                )
    finally:
        if out_file is not None:
            out_file.close()
    return records


def select_top(records: list[ScoreRecord], manifest: Manifest, fraction: float = 0.5) -> Manifest:
    """Rank by weighted score descending (ties by id) and keep ceil(fraction*N)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if not records:
        log.warning("select_top called with no score records")
        return Manifest([])
    by_id = {r.id: r for r in manifest.records}
    ranked = sorted(records, key=lambda r: (-r.weighted, r.sample_id))
    kept = ranked[: math.ceil(fraction * len(ranked))]
    return Manifest([by_id[r.sample_id] for r in kept])


def assemble_finetune_set(
    annotations: list[ScoreRecord],
    manifest: Manifest,
    out_path: str | Path,
    prompt: str = DEFAULT_SCORING_PROMPT,
) -> tuple[int, list[str]]:
    """Instruction-tuning JSONL pairing each annotated image with the scoring
    prompt and its target scores. Returns (written, skipped dangling ids)."""
    by_id = {r.id: r for r in manifest.records}
    kept: dict[str, ScoreRecord] = {}
    skipped: list[str] = []
    for ann in annotations:
        if ann.sample_id not in by_id:
            skipped.append(ann.sample_id)
            continue
        if ann.sample_id in kept:
            log.warning("duplicate annotation for %s: keeping the later one", ann.sample_id)
        kept[ann.sample_id] = ann
    if not kept:
        log.warning("assembling an empty fine-tune file")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        for sample_id, ann in kept.items():
            fh.write(
                json.dumps(
                    {
                        "image_path": by_id[sample_id].image_path,
                        "prompt": prompt,
                        "response": json.dumps(
                            {
                                "color": ann.color,
                                "visibility": ann.visibility,
                                "semi_transparency": ann.translucency,
                            }
                        ),
                    }
                )
                + "\n"
            )
    return len(kept), skipped

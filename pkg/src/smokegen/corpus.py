"""Canonical data model: samples, manifests, binary masks, bboxes, YOLO export, mixing.

Manifests are JSONL, one record per line with fields
{id, image_path, mask_path?, caption, source, split}. Mask files are
single-channel PNG with foreground 255 / background 0. YOLO label files carry
one "class_id cx cy w h" line per object at 6-decimal fixed precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import CapacityError, NoForegroundError

SCHEMA_VERSION = 1
SOURCES = ("real", "synthetic", "background")
SPLITS = ("train", "val", "test")
DEFAULT_MASK_THRESHOLD = 128

_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8),
    8: np.ones((3, 3), dtype=np.uint8),
}


@dataclass(frozen=True)
class SmokeSample:
    """One (image, mask, caption) record; masks are absent for smoke-free backgrounds."""

    id: str
    image_path: str
    caption: str
    source: str
    split: str
    mask_path: str | None = None

    def to_json(self) -> dict:
        obj: dict = {"id": self.id, "image_path": self.image_path}
        if self.mask_path is not None:
            obj["mask_path"] = self.mask_path
        obj["caption"] = self.caption
        obj["source"] = self.source
        obj["split"] = self.split
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "SmokeSample":
        return cls(
            id=obj["id"],
            image_path=obj["image_path"],
            caption=obj["caption"],
            source=obj["source"],
            split=obj["split"],
            mask_path=obj.get("mask_path"),
        )


@dataclass(eq=False)
class BinaryMask:
    """H×W grid over {0, 1}, stored uint8."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.size == 0:
            raise ValueError(f"mask must be a non-empty 2-D grid, got shape {bits.shape}")
        if bits.dtype != np.uint8:
            bits = bits.astype(np.uint8)
        if bits.max(initial=np.uint8(0)) > 1:
            raise ValueError("mask bits must be 0 or 1")
        self.bits = bits

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def foreground_count(self) -> int:
        return int(self.bits.sum())


def binarize_mask(raster: np.ndarray, threshold: float = DEFAULT_MASK_THRESHOLD) -> BinaryMask:
    """Threshold a soft single-channel raster: 1 where raster >= threshold."""
    arr = np.asarray(raster)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("raster must be a non-empty single-channel image")
    return BinaryMask((arr >= threshold).astype(np.uint8))


def load_mask(path: str | Path, threshold: float = DEFAULT_MASK_THRESHOLD) -> BinaryMask:
    arr = np.asarray(Image.open(path).convert("L"))
    return binarize_mask(arr, threshold)


def save_mask(mask: BinaryMask, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.bits * np.uint8(255), mode="L").save(path)


def resize_mask(mask: BinaryMask, width: int, height: int) -> BinaryMask:
    """Nearest-neighbor resize; stays binary."""
    if width <= 0 or height <= 0:
        raise ValueError("target dimensions must be positive")
    img = Image.fromarray(mask.bits * np.uint8(255), mode="L")
    out = np.asarray(img.resize((width, height), Image.NEAREST))
    return binarize_mask(out)


def largest_component_bbox(mask: BinaryMask, connectivity: int = 8) -> tuple[int, int, int, int]:
    """Tight (x0, y0, w, h) of the largest connected foreground component.

    Equal-size components tie-break on the component whose first pixel comes
    earliest in a row-major scan.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, count = ndimage.label(mask.bits, structure=_STRUCTURES[connectivity])
    if count == 0:
        raise NoForegroundError("mask has no foreground pixels")
    flat = labels.ravel()
    sizes = np.bincount(flat)
    sizes[0] = 0
    candidates = np.flatnonzero(sizes == sizes.max())
    label_id = min(candidates, key=lambda lab: int(np.argmax(flat == lab)))
    ys, xs = np.nonzero(labels == label_id)
    x0, y0 = int(xs.min()), int(ys.min())
    return (x0, y0, int(xs.max()) - x0 + 1, int(ys.max()) - y0 + 1)


@dataclass(frozen=True)
class DetectionLabel:
    """Normalized class/center/size box; the unit of YOLO export."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        eps = 1e-9
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"center ({self.cx}, {self.cy}) outside the unit square")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"extents ({self.w}, {self.h}) must lie in (0, 1]")
        if (
            self.cx - self.w / 2 < -eps
            or self.cx + self.w / 2 > 1 + eps
            or self.cy - self.h / 2 < -eps
            or self.cy + self.h / 2 > 1 + eps
        ):
            raise ValueError("box extends beyond the unit square")

    def format_line(self) -> str:
        return f"{self.class_id} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"

    @classmethod
    def parse_line(cls, line: str) -> "DetectionLabel":
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"expected 5 fields, got {len(parts)}: {line!r}")
        return cls(int(parts[0]), *(float(p) for p in parts[1:]))


def to_yolo_label(
    bbox: tuple[int, int, int, int], image_w: int, image_h: int, class_id: int = 0
) -> DetectionLabel:
    """Normalize a pixel rectangle (x0, y0, w, h) to a center/size label."""
    x0, y0, w, h = bbox
    if w <= 0 or h <= 0:
        raise ValueError(f"bbox extents must be positive, got ({w}, {h})")
    if x0 < 0 or y0 < 0 or x0 + w > image_w or y0 + h > image_h:
        raise ValueError(f"bbox {bbox} exceeds image bounds {image_w}x{image_h}")
    return DetectionLabel(
        class_id,
        (x0 + w / 2) / image_w,
        (y0 + h / 2) / image_h,
        w / image_w,
        h / image_h,
    )


def from_yolo_label(
    label: DetectionLabel, image_w: int, image_h: int
) -> tuple[float, float, float, float]:
    """Denormalize back to a pixel rectangle (x0, y0, w, h)."""
    w = label.w * image_w
    h = label.h * image_h
    return (label.cx * image_w - w / 2, label.cy * image_h - h / 2, w, h)


def mask_to_label(
    mask: BinaryMask, connectivity: int = 8, class_id: int = 0
) -> DetectionLabel:
    """Label for the largest connected region of a mask."""
    bbox = largest_component_bbox(mask, connectivity)
    return to_yolo_label(bbox, mask.width, mask.height, class_id)


@dataclass
class Manifest:
    """Ordered record collection with JSONL persistence."""

    records: list[SmokeSample] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def ids(self) -> set[str]:
        return {r.id for r in self.records}

    def get(self, sample_id: str) -> SmokeSample:
        for r in self.records:
            if r.id == sample_id:
                return r
        raise KeyError(sample_id)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(r.to_json(), ensure_ascii=False) for r in self.records]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(SmokeSample.from_json(json.loads(line)))
        return cls(records)


def append_record(path: str | Path, record: SmokeSample) -> None:
    """Append one record to a JSONL manifest (single-writer contract)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
        fh.flush()


def resolve_path(root: str | Path | None, path: str) -> Path:
    p = Path(path)
    if p.is_absolute() or root is None:
        return p
    return Path(root) / p


def rebase_manifest(m: Manifest, old_root: str | Path, new_root: str | Path) -> Manifest:
    """Rewrite relative record paths so they resolve from new_root instead of
    old_root; absolute paths pass through untouched."""
    import os

    def rebase(path: str | None) -> str | None:
        if path is None or Path(path).is_absolute():
            return path
        return os.path.relpath(Path(old_root) / path, new_root)

    records = [
        SmokeSample(
            id=r.id,
            image_path=rebase(r.image_path),
            mask_path=rebase(r.mask_path),
            caption=r.caption,
            source=r.source,
            split=r.split,
        )
        for r in m.records
    ]
    return Manifest(records, m.schema_version)


def validate_manifest(m: Manifest, root: str | Path | None = None) -> list[str]:
    """Check type invariants and file references; violations are data, not exceptions."""
    violations: list[str] = []
    seen: set[str] = set()
    for r in m.records:
        if r.id in seen:
            violations.append(f"duplicate id: {r.id}")
        seen.add(r.id)
        if not r.caption:
            violations.append(f"{r.id}: empty caption")
        if r.source not in SOURCES:
            violations.append(f"{r.id}: unknown source {r.source!r}")
        if r.split not in SPLITS:
            violations.append(f"{r.id}: unknown split {r.split!r}")
        image_path = resolve_path(root, r.image_path)
        image_size = None
        if not image_path.is_file():
            violations.append(f"{r.id}: missing image file {r.image_path}")
        else:
            with Image.open(image_path) as img:
                image_size = img.size
        if r.mask_path is not None:
            mask_path = resolve_path(root, r.mask_path)
            if not mask_path.is_file():
                violations.append(f"{r.id}: missing mask file {r.mask_path}")
            elif image_size is not None:
                with Image.open(mask_path) as msk:
                    if msk.size != image_size:
                        violations.append(
                            f"{r.id}: mask size {msk.size} != image size {image_size}"
                        )
    return violations


def _parse_ratio(ratio) -> tuple[int, int]:
    if isinstance(ratio, str):
        a, _, b = ratio.partition(":")
        ratio = (int(a), int(b))
    a, b = int(ratio[0]), int(ratio[1])
    if a < 0 or b < 0 or (a == 0 and b == 0):
        raise ValueError(f"ratio parts must be non-negative and not both zero: {ratio}")
    return a, b


def _mix_plan(
    n: int, a: int, b: int, p: int, q: int, avail: dict[str, int]
) -> tuple[dict[str, int] | None, str]:
    """Cell counts for one total n, or (None, deficient-category)."""
    n_r = round(n * a / (a + b))
    n_s = n - n_r
    n_p = round(n * p / (p + q))
    n_n = n - n_p
    if avail["rp"] + avail["rn"] < n_r:
        return None, "real"
    if avail["sp"] + avail["sn"] < n_s:
        return None, "synthetic"
    if avail["rp"] + avail["sp"] < n_p:
        return None, "positive"
    if avail["rn"] + avail["sn"] < n_n:
        return None, "negative"
    # one free parameter: lam = count of real positives; prefer synthetic positives
    lo = max(0, n_p - avail["sp"], n_r - avail["rn"], n_r - n_n)
    hi = min(avail["rp"], n_p, n_r, n_r - n_n + avail["sn"])
    if lo > hi:
        return None, "jointly compatible"
    lam = lo
    return {"rp": lam, "rn": n_r - lam, "sp": n_p - lam, "sn": n_n - (n_r - lam)}, ""


def mix_datasets(
    real: Manifest,
    synthetic: Manifest,
    ratio_real_synth=(1, 1),
    ratio_pos_neg=(1, 1),
    seed: int = 0,
    total: int | None = None,
) -> Manifest:
    """Blend real and synthetic manifests honoring source and positive/negative ratios.

    Positives are smoke records (source != "background"); negatives are
    smoke-free backgrounds. Output is seeded-shuffled and deterministic; counts
    honor both ratios within one record. When `total` is omitted the largest
    feasible size is used.
    """
    a, b = _parse_ratio(ratio_real_synth)
    p, q = _parse_ratio(ratio_pos_neg)
    pools = {
        "rp": [r for r in real.records if r.source != "background"],
        "rn": [r for r in real.records if r.source == "background"],
        "sp": [r for r in synthetic.records if r.source != "background"],
        "sn": [r for r in synthetic.records if r.source == "background"],
    }
    avail = {k: len(v) for k, v in pools.items()}

    if total is not None:
        plan, deficient = _mix_plan(total, a, b, p, q, avail)
        if plan is None:
            raise CapacityError(
                deficient, f"not enough {deficient} records for a {total}-record mix"
            )
        n = total
    else:
        n = sum(avail.values())
        plan = None
        while n > 0:
            plan, _ = _mix_plan(n, a, b, p, q, avail)
            if plan is not None:
                break
            n -= 1
        if plan is None:
            _, deficient = _mix_plan(1, a, b, p, q, avail)
            raise CapacityError(deficient, f"no {deficient} records available to mix")

    rng = np.random.default_rng(seed)
    chosen: list[SmokeSample] = []
    for key in ("rp", "rn", "sp", "sn"):
        pool = pools[key]
        take = plan[key]
        order = rng.permutation(len(pool))[:take]
        chosen.extend(pool[i] for i in order)
    final = rng.permutation(len(chosen))
    records = [chosen[i] for i in final]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("id collision between real and synthetic manifests")
    return Manifest(records)


def export_yolo_dataset(
    manifest: Manifest,
    out_dir: str | Path,
    root: str | Path | None = None,
    threshold: float = DEFAULT_MASK_THRESHOLD,
    connectivity: int = 8,
    class_id: int = 0,
) -> dict[str, int]:
    """Write images/, labels/ (one .txt per image), split lists, and a dataset index.

    Background records get empty label files so they train as negatives.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    labels_dir = out_dir / "labels"
    images_dir.mkdir(parents=True, exist_ok=True)
    labels_dir.mkdir(parents=True, exist_ok=True)

    counts = {"images": 0, "labelled": 0, "negatives": 0}
    split_lists: dict[str, list[str]] = {s: [] for s in SPLITS}
    for r in manifest.records:
        src = resolve_path(root, r.image_path)
        dest = images_dir / f"{r.id}.jpg"
        with Image.open(src) as img:
            img.convert("RGB").save(dest, quality=95)
        label_path = labels_dir / f"{r.id}.txt"
        if r.mask_path is not None:
            mask = load_mask(resolve_path(root, r.mask_path), threshold)
            line = mask_to_label(mask, connectivity, class_id).format_line()
            label_path.write_text(line + "\n", encoding="utf-8")
            counts["labelled"] += 1
        else:
            label_path.write_text("", encoding="utf-8")
            counts["negatives"] += 1
        counts["images"] += 1
        split_lists[r.split].append(f"images/{r.id}.jpg")

    for split in ("train", "val"):
        (out_dir / f"{split}.txt").write_text(
            "".join(line + "\n" for line in split_lists[split]), encoding="utf-8"
        )
    if split_lists["test"]:
        (out_dir / "test.txt").write_text(
            "".join(line + "\n" for line in split_lists["test"]), encoding="utf-8"
        )
    (out_dir / "dataset.yaml").write_text(
        "path: .\ntrain: train.txt\nval: val.txt\nnames:\n  0: smoke\n",
        encoding="utf-8",
    )
    return counts

"""Acceptance suite: one test per criterion, each printing its pass line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
Full-scale headline numbers (A100-class training on real imagery) are out of
test scope by design; these criteria are the property-based desk-scale gate.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import flood_fill_bbox, naive_mse, naive_psnr, naive_select, naive_ssim
from fixtures_util import build_export_fixture
from smokegen.backbone import (
    build_conditioning,
    build_pretrained_toy,
    build_toy_backbone,
    uncond_like,
)
from smokegen.corpus import (
    BinaryMask,
    Manifest,
    SmokeSample,
    export_yolo_dataset,
    from_yolo_label,
    largest_component_bbox,
    mix_datasets,
    to_yolo_label,
)
from smokegen.diffusion import (
    LatentBatch,
    add_noise,
    base_loss,
    make_linear_schedule,
    reverse_step,
    sample_cfg,
)
from smokegen.filtering import (
    MaskHeuristicScorer,
    ScoreRecord,
    score_candidates,
    select_top,
    weighted_score,
)
from smokegen.generator import GenConfig, generate_batch, pair_masks
from smokegen.injection import (
    AdapterSet,
    TapAdapter,
    FeatureBundle,
    attach_adapters,
    default_schedule,
    load_adapter_checkpoint,
)
from smokegen.mrd import MrdConfig, morph, perturb_mask, total_loss
from smokegen.toydata import build_background_corpus, build_blob_corpus, make_blob_batch, make_mask_pool
from smokegen.trainer import TrainConfig, run_training

GOLDEN_DIR = Path(__file__).parent / "data" / "golden_labels"


def _report(name: str, detail: str):
    print(f"[PASS] {name}: {detail}")


def test_forward_reverse_consistency():
    """Reverse-stepping forward-noised latents reproduces the previous step."""
    start = time.monotonic()
    sched = make_linear_schedule(100)
    gen = torch.Generator().manual_seed(0)
    x0 = torch.randn(2, 2, 8, 8, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 2, 8, 8, generator=gen, dtype=torch.float64)
    worst = 0.0
    for t in range(2, 101):
        stepped = reverse_step(add_noise(x0, eps, t, sched), eps, t, sched)
        direct = add_noise(x0, eps, t - 1, sched)
        rel = float((stepped - direct).abs().max() / direct.abs().max())
        worst = max(worst, rel)
        assert rel < 1e-6, f"t={t}: relative error {rel}"
    elapsed = time.monotonic() - start
    assert elapsed < 10.0
    _report(
        "forward/reverse consistency",
        f"worst relative error {worst:.2e} over t=2..100 in {elapsed:.2f}s",
    )


def test_adapter_identity_at_init():
    """Zero-initialized adapters leave the backbone output unchanged."""
    bundle = build_toy_backbone(seed=0)
    schedule = default_schedule()
    adapters = AdapterSet.build(
        bundle.denoiser.tap_points, schedule, bundle.extractor.feature_channels, seed=7
    )
    adapted = attach_adapters(bundle.denoiser, schedule, adapters)
    rng = np.random.default_rng(21)
    worst = 0.0
    for trial in range(20):
        images, masks, captions = make_blob_batch(2, 8, rng)
        _, cond = build_conditioning(images, masks, captions, bundle)
        x = torch.randn(2, 1, 8, 8, generator=torch.Generator().manual_seed(trial))
        t = int(rng.integers(1, 101))
        with torch.no_grad():
            gap = float(
                (adapted.predict(x, t, cond) - bundle.denoiser.predict(x, t, cond)).abs().max()
            )
        worst = max(worst, gap)
        assert gap < 1e-6
    _report("adapter identity at init", f"max deviation {worst:.2e} over 20 random batches")


def _finite_difference_check(loss_fn, params, step=1e-5, tol=1e-4):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    for p, analytic in zip(params, grads):
        fd = torch.zeros_like(p)
        with torch.no_grad():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = loss_fn().item()
                flat[i] = orig - step
                lo = loss_fn().item()
                flat[i] = orig
                fd.view(-1)[i] = (hi - lo) / (2 * step)
        rel = float((analytic - fd).norm() / max(float(fd.norm()), 1e-12))
        worst = max(worst, rel)
        assert rel < tol, f"gradient mismatch {rel} on a {tuple(p.shape)} tensor"
    return worst


def test_gradient_correctness():
    """Analytic gradients match central finite differences at 64-bit."""
    torch.manual_seed(3)
    adapter = TapAdapter("both", tap_channels=3, feature_channels=4, zero_init=False).double()
    fb = FeatureBundle(
        torch.randn(1, 4, 2, 2, dtype=torch.float64),
        torch.randn(1, 4, 2, 2, dtype=torch.float64),
    )
    x = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    target = torch.randn(1, 3, 2, 2, dtype=torch.float64)
    params = list(adapter.parameters())
    worst_jca = _finite_difference_check(
        lambda: ((adapter(x, fb) - target) ** 2).mean(), params
    )

    eps = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    pred = torch.randn(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
    m = torch.randint(0, 2, (4, 4), generator=torch.Generator().manual_seed(0)).double()
    worst_loss = _finite_difference_check(lambda: total_loss(eps, pred, m, 0.4), [pred])
    _report(
        "gradient correctness",
        f"joint-attention worst rel {worst_jca:.2e}, loss worst rel {worst_loss:.2e}",
    )


def test_loss_identities():
    """Weighted loss collapses to the plain objective in the degenerate cases."""
    g = torch.Generator().manual_seed(5)
    eps = torch.randn(2, 2, 6, 6, generator=g, dtype=torch.float64)
    pred = torch.randn(2, 2, 6, 6, generator=g, dtype=torch.float64)
    m = torch.randint(0, 2, (6, 6), generator=g).double()
    base = base_loss(eps, pred).item()
    assert total_loss(eps, pred, m, 0.0).item() == base

    ones = torch.ones(6, 6, dtype=torch.float64)
    for omega in (0.0, 0.4, 1.0):
        assert total_loss(eps, pred, ones, omega).item() == base

    points = [0.0, 0.25, 0.5, 0.75, 1.0]
    values = [total_loss(eps, pred, m, w).item() for w in points]
    lo, hi = values[0], values[-1]
    for w, v in zip(points, values):
        assert abs(v - (lo + w * (hi - lo))) < 1e-12
    _report("loss identities", "omega=0 exact, all-ones mask exact, linear at 5 omegas")


def test_morphology_oracle():
    """Vectorized morphology matches the windowed definition; perturbation is local."""
    from oracles import sliding_morph

    rng = np.random.default_rng(42)
    checked = 0
    for _ in range(100):
        bits = (rng.random((32, 32)) < 0.4).astype(np.uint8)
        for k in (1, 3, 10, 20):
            for op in ("dilate", "erode"):
                got = morph(BinaryMask(bits), op, k).bits
                assert np.array_equal(got, sliding_morph(bits, op, k)), f"k={k} {op}"
                checked += 1

    bits = np.zeros((160, 160), dtype=np.uint8)
    bits[50:110, 40:120] = 1
    boundary = bits & ~sliding_morph(bits, "erode", 3)
    ys, xs = np.nonzero(boundary)
    for seed in range(5):
        out = perturb_mask(BinaryMask(bits), MrdConfig(), np.random.default_rng(seed))
        for cy, cx in zip(*np.nonzero(out.bits.bits != bits)):
            dist = int(np.min(np.maximum(np.abs(ys - cy), np.abs(xs - cx))))
            assert dist <= 60, f"seed {seed}: change at Chebyshev distance {dist}"
    _report("morphology oracle", f"{checked} mask/kernel/op combinations exact; locality <= 60px")


def test_toy_end_to_end(tmp_path):
    """Blob-corpus adapter training improves the loss and fills masks at >= 2x."""
    start = time.monotonic()
    bundle, sched = build_pretrained_toy(seed=0)
    tmp = tmp_path / "toy"
    manifest = build_blob_corpus(tmp / "corpus", 64, size=8, seed=11)
    cfg = TrainConfig(
        learning_rate=3e-3,
        batch_size=8,
        max_iters=300,
        mrd=MrdConfig(omega=0.4),
        seed=0,
        checkpoint_every=100,
    )
    ckpt = run_training(manifest, cfg, bundle, sched, tmp / "train", root=tmp / "corpus")
    losses = [
        json.loads(line)["loss"]
        for line in (tmp / "train" / "metrics.jsonl").read_text().splitlines()
    ]
    assert len(losses) == 300
    first, last = float(np.mean(losses[:50])), float(np.mean(losses[-50:]))
    assert last < first, f"loss did not decrease: first50={first} last50={last}"

    adapters, schedule, _ = load_adapter_checkpoint(ckpt)
    adapted = attach_adapters(bundle.denoiser, schedule, adapters)
    rng = np.random.default_rng(3)
    hits = 0
    for i in range(20):
        images, masks, captions = make_blob_batch(1, 8, rng)
        _, cond = build_conditioning(images, masks, captions, bundle)
        uncond = uncond_like(cond, bundle)
        latents = sample_cfg(adapted, cond, uncond, sched, steps=50, guidance=7.5, seed=100 + i)
        decoded = bundle.autoencoder.decode(LatentBatch(latents)).clamp(0, 1)
        inside = float(decoded[masks.bool()].mean())
        outside = float(decoded[~masks.bool()].mean())
        if inside >= 2.0 * outside:
            hits += 1
    elapsed = time.monotonic() - start
    assert hits >= 16, f"only {hits}/20 samples reached the 2x contrast"
    assert elapsed < 300.0, f"toy run took {elapsed:.0f}s"
    _report(
        "toy end-to-end",
        f"loss {first:.4f}->{last:.4f}, {hits}/20 samples >= 2x contrast, {elapsed:.0f}s",
    )


def test_curation_arithmetic():
    """Weighted scoring and top-fraction selection are exact."""
    assert weighted_score(8, 6, 4) == 6.6
    assert weighted_score(10, 10, 10) == 10.0
    assert weighted_score(0, 0, 0) == 0.0

    rng = np.random.default_rng(12)
    for trial in range(1000):
        n = int(rng.integers(1, 12))
        records = [
            ScoreRecord(f"s{i:05d}", *map(float, rng.integers(0, 11, 3))) for i in range(n)
        ]
        manifest = Manifest(
            [SmokeSample(r.sample_id, "x.png", "c", "synthetic", "train") for r in records]
        )
        fraction = float(rng.uniform(0.05, 1.0))
        got = [r.id for r in select_top(records, manifest, fraction)]
        want = naive_select([(r.sample_id, r.weighted) for r in records], fraction)
        assert got == want, f"trial {trial}"

    big = [
        ScoreRecord(f"b{i:06d}", float(i % 11), float((i * 7) % 11), float((i * 3) % 11))
        for i in range(60000)
    ]
    manifest = Manifest(
        [SmokeSample(r.sample_id, "x.png", "c", "synthetic", "train") for r in big]
    )
    assert len(select_top(big, manifest, 0.5)) == 30000
    _report("curation arithmetic", "6.6 exact, 1000 sort-oracle trials, 60k -> 30000")


def test_annotation_export_oracles(tmp_path):
    """Bbox extraction, label round trips, and export bytes match the oracles."""
    rng = np.random.default_rng(77)
    for trial in range(200):
        bits = (rng.random((32, 32)) < 0.35).astype(np.uint8)
        if bits.sum() == 0:
            bits[16, 16] = 1
        for conn in (4, 8):
            assert largest_component_bbox(BinaryMask(bits), conn) == flood_fill_bbox(bits, conn)

    for _ in range(200):
        iw, ih = int(rng.integers(8, 512)), int(rng.integers(8, 512))
        w, h = int(rng.integers(1, iw + 1)), int(rng.integers(1, ih + 1))
        x0, y0 = int(rng.integers(0, iw - w + 1)), int(rng.integers(0, ih - h + 1))
        label = to_yolo_label((x0, y0, w, h), iw, ih)
        back = from_yolo_label(label, iw, ih)
        assert max(abs(back[0] - x0), abs(back[1] - y0), abs(back[2] - w), abs(back[3] - h)) <= 0.5

    fixture_root = tmp_path / "fixture"
    manifest = build_export_fixture(fixture_root)
    out = tmp_path / "export"
    export_yolo_dataset(manifest, out, root=fixture_root)
    for rec in manifest:
        got = (out / "labels" / f"{rec.id}.txt").read_bytes()
        golden = (GOLDEN_DIR / f"{rec.id}.txt").read_bytes()
        assert got == golden, f"{rec.id}: label bytes differ from the golden file"
    _report(
        "annotation/export oracles",
        "200 bbox oracle masks, 200 round trips, 10 golden label files byte-identical",
    )


def test_metric_correctness():
    """Native PSNR/SSIM/MSE agree with the two-loop references."""
    from smokegen.evalkit import mse_img, psnr, ssim

    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(20):
        channels = 3 if trial % 2 == 0 else 0
        shape = (32, 32, channels) if channels else (32, 32)
        a = rng.integers(0, 256, size=shape).astype(np.uint8)
        b = rng.integers(0, 256, size=shape).astype(np.uint8)
        for got, want in (
            (mse_img(a, b), naive_mse(a, b)),
            (psnr(a, b), naive_psnr(a, b)),
            (ssim(a, b), naive_ssim(a, b)),
        ):
            worst = max(worst, abs(got - want))
            assert abs(got - want) < 1e-9

    flat = np.zeros((16, 16), dtype=np.uint8)
    offset = np.full((16, 16), 16, dtype=np.uint8)
    assert psnr(flat, offset) == pytest.approx(24.05, abs=0.01)
    _report(
        "metric correctness",
        f"20 random pairs within {worst:.1e}; constant-16 PSNR {psnr(flat, offset):.4f} dB",
    )


def test_pipeline_counts(tmp_path, toy_stack):
    """Mock-client pipeline honors every generation/curation/mixing multiplier."""
    bundle, sched = toy_stack
    backgrounds = build_background_corpus(tmp_path / "bg", 10, size=8, seed=4)
    pool = make_mask_pool(6, 8, seed=5)
    cfg = GenConfig(masks_per_background=2, samples_per_pair=3, steps=50, seed=9)
    pairs = pair_masks(backgrounds, pool, cfg, np.random.default_rng(9), root=tmp_path / "bg")
    assert len(pairs) == 20

    schedule = default_schedule()
    adapters = AdapterSet.build(
        bundle.denoiser.tap_points, schedule, bundle.extractor.feature_channels, seed=1
    )
    generated = generate_batch(
        pairs, adapters, schedule, bundle, sched, cfg, tmp_path / "gen", root=tmp_path / "bg"
    )
    assert len(generated) == 60, f"expected 60 candidates, got {len(generated)}"

    scores = score_candidates(generated, MaskHeuristicScorer(), root=tmp_path / "gen")
    selected = select_top(scores, generated, 0.5)
    assert len(selected) == 30

    real = build_background_corpus(tmp_path / "real", 30, size=8, seed=6)
    mixed = mix_datasets(real, selected, (1, 1), (1, 1), seed=2)
    assert len(mixed) == 60
    assert sum(1 for r in mixed if r.source == "synthetic") == 30
    assert sum(1 for r in mixed if r.source == "background") == 30
    _report(
        "pipeline counts",
        "10 bg x 2 masks x 3 samples = 60; top-50% = 30; 1:1 mix with 30 real = 60",
    )

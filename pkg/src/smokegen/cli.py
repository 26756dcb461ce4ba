"""Command-line entry point orchestrating prep, training, generation,
curation, export, evaluation, and the annotation service.

Model-backed stages run against the seeded desk-scale backbone and mock
clients; production model endpoints are deployment bindings that replace the
same client interfaces. Every run writes a run-record JSON under
<data_root>/runs/.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import corpus, filtering, generator, prep, service, trainer
from .backbone import build_pretrained_toy
from .config import config_hash, load_config, validate_config
from .diffusion import NoiseSchedule
from .errors import SmokegenError
from .evalkit import evaluate_pairs
from .injection import load_adapter_checkpoint
from .mrd import MrdConfig


def _git_describe() -> str | None:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        return out.stdout.strip() or None
    except Exception:
        return None


def _write_run_record(cfg: dict, args, started: float, exit_code: int) -> None:
    try:
        data_root = Path(cfg["global"]["data_root"])
        runs = data_root / "runs"
        runs.mkdir(parents=True, exist_ok=True)
        stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime(started))
        record = {
            "command": args.command,
            "argv": sys.argv[1:],
            "config": getattr(args, "config", None),
            "config_hash": config_hash(getattr(args, "config", None)),
            "git": _git_describe(),
            "started": started,
            "duration_s": round(time.time() - started, 3),
            "exit_code": exit_code,
        }
        path = runs / f"{stamp}-{args.command}-{int(started * 1000) % 100000}.json"
        path.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    except Exception:
        pass  # the run record must never fail the run


def _toy_stack(cfg: dict):
    toy = cfg["toy"]
    return build_pretrained_toy(
        seed=cfg["global"]["seed"],
        latent_size=toy["latent_size"],
        T=toy["T"],
        pretrain_steps=toy["pretrain_steps"],
        width=toy["width"],
    )


def _cmd_validate(args, cfg) -> int:
    base = Path(args.config).parent if args.config else Path.cwd()
    violations = validate_config(cfg, base)
    if args.manifest:
        m = corpus.Manifest.load(args.manifest)
        violations += corpus.validate_manifest(m, Path(args.manifest).parent)
    for v in violations:
        print(f"violation: {v}")
    print(f"{len(violations)} violation(s)")
    return 0 if not violations else 1


def _cmd_prep(args, cfg) -> int:
    section = cfg["prep"]
    if section["seg_endpoint"] or section["cap_endpoint"]:
        raise ValueError(
            "remote prep endpoints are deployment bindings; clear them to run the mock clients"
        )
    manifest = prep.build_training_set(
        args.detections,
        prep.BoxFillSegmentation(),
        prep.ConstantCaption(),
        args.out,
        root=Path(args.detections).parent,
        max_tokens=section["max_tokens"],
        stop_patterns=tuple(section["stop_patterns"]),
        threshold=section["threshold"],
        workers=cfg["global"]["workers"],
    )
    print(f"prepared {len(manifest)} samples -> {args.out}")
    return 0


def _cmd_train(args, cfg) -> int:
    section = cfg["train"]
    train_cfg = trainer.TrainConfig(
        learning_rate=args.lr or section["learning_rate"],
        batch_size=args.batch_size or section["batch_size"],
        max_iters=args.iters or section["max_iters"],
        mrd=MrdConfig(**section["mrd"]),
        seed=args.seed if args.seed is not None else cfg["global"]["seed"],
        checkpoint_every=section["checkpoint_every"],
        grad_accum=section["grad_accum"],
    )
    bundle, sched = _toy_stack(cfg)
    manifest = corpus.Manifest.load(args.manifest)
    ckpt = trainer.run_training(
        manifest,
        train_cfg,
        bundle,
        sched,
        args.out,
        root=Path(args.manifest).parent,
        restart=args.restart,
    )
    print(f"adapter checkpoint -> {ckpt}")
    return 0


def _cmd_generate(args, cfg) -> int:
    section = cfg["generate"]
    gen_cfg = generator.GenConfig(
        guidance_scale=section["guidance_scale"],
        steps=section["steps"],
        masks_per_background=section["masks_per_background"],
        samples_per_pair=section["samples_per_pair"],
        seed=args.seed if args.seed is not None else cfg["global"]["seed"],
    )
    adapters, schedule, extra = load_adapter_checkpoint(args.ckpt)
    bundle, sched = _toy_stack(cfg)
    if "noise_schedule" in extra:
        sched = NoiseSchedule.from_json(extra["noise_schedule"])
    mask_paths = sorted(Path(args.masks).glob("*.png"))
    if not mask_paths:
        raise ValueError(f"no mask PNGs under {args.masks}")
    pool = [corpus.load_mask(p) for p in mask_paths]
    backgrounds = corpus.Manifest.load(args.backgrounds)
    rng = np.random.default_rng(gen_cfg.seed)
    pairs = generator.pair_masks(
        backgrounds, pool, gen_cfg, rng, root=Path(args.backgrounds).parent
    )
    manifest = generator.generate_batch(
        pairs,
        adapters,
        schedule,
        bundle,
        sched,
        gen_cfg,
        args.out,
        root=Path(args.backgrounds).parent,
    )
    print(f"generated {len(manifest)} samples -> {args.out}")
    return 0


def _cmd_score(args, cfg) -> int:
    manifest = corpus.Manifest.load(args.manifest)
    section = cfg["score"]
    records = filtering.score_candidates(
        manifest,
        filtering.MaskHeuristicScorer(),
        root=Path(args.manifest).parent,
        workers=cfg["global"]["workers"],
        out_path=args.out,
        prompt=section["prompt"] or filtering.DEFAULT_SCORING_PROMPT,
        retries=section["retries"],
        outage_limit=section["outage_limit"],
    )
    print(f"scored {len(records)} samples -> {args.out}")
    return 0


def _cmd_select(args, cfg) -> int:
    records = filtering.load_scores(args.scores)
    manifest = corpus.Manifest.load(args.manifest)
    fraction = args.fraction if args.fraction is not None else cfg["select"]["fraction"]
    selected = filtering.select_top(records, manifest, fraction)
    # keep records resolvable from the output manifest's own directory
    selected = corpus.rebase_manifest(
        selected, Path(args.manifest).parent, Path(args.out).parent
    )
    selected.save(args.out)
    print(f"selected {len(selected)} of {len(records)} -> {args.out}")
    return 0


def _cmd_export(args, cfg) -> int:
    manifest = corpus.Manifest.load(args.manifest)
    counts = corpus.export_yolo_dataset(
        manifest,
        args.out,
        root=Path(args.manifest).parent,
        threshold=cfg["export"]["threshold"],
        connectivity=cfg["export"]["connectivity"],
    )
    print(
        f"exported {counts['images']} images "
        f"({counts['labelled']} labelled, {counts['negatives']} negatives) -> {args.out}"
    )
    return 0


def _cmd_eval(args, cfg) -> int:
    generated = corpus.Manifest.load(args.generated)
    reference = corpus.Manifest.load(args.reference)
    report = evaluate_pairs(
        generated,
        reference,
        root_generated=Path(args.generated).parent,
        root_reference=Path(args.reference).parent,
        window=cfg["eval"]["window"],
    )
    report.save_json(args.out)
    if args.csv:
        report.save_csv(args.csv)
    print(f"evaluated {len(report.rows)} pairs -> {args.out}")
    return 0


def _cmd_annotate_serve(args, cfg) -> int:
    service.serve(
        args.manifest,
        args.annotations,
        root=Path(args.manifest).parent,
        ui_dir=args.ui,
        host=args.host or cfg["serve"]["host"],
        port=args.port or cfg["serve"]["port"],
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smokegen", description="Synthetic smoke dataset factory"
    )
    parser.add_argument("--config", help="TOML config file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check config and optional manifest")
    p.add_argument("--manifest")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("prep", help="build the training corpus from detections")
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prep)

    p = sub.add_parser("train", help="train injection adapters")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--restart", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="synthesize smoke into backgrounds")
    p.add_argument("--backgrounds", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("score", help="score candidates with the mock scorer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("select", help="keep the top fraction by weighted score")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("export", help="write a YOLO detection dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("eval", help="paired image-quality report")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("annotate-serve", help="serve the annotation API and UI")
    p.add_argument("--manifest", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--ui", help="static UI directory to mount")
    p.set_defaults(func=_cmd_annotate_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    started = time.time()
    cfg = {"global": {"data_root": "."}}
    try:
        cfg = load_config(args.config)
        code = args.func(args, cfg)
    except (ValueError, FileNotFoundError, KeyError, SmokegenError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    except Exception:
        traceback.print_exc()
        code = 2
    _write_run_record(cfg, args, started, code)
    return code


if __name__ == "__main__":
    sys.exit(main())

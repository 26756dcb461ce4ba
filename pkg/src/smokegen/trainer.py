"""Adapter training over a frozen backbone: per-step loss assembly, freezing
policy and its verification, checkpointing with exact-resume rng streams."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import BackboneBundle, build_conditioning
from .corpus import BinaryMask, Manifest, SmokeSample, load_mask, resolve_path
from .diffusion import NoiseSchedule, add_noise
from .errors import CheckpointError
from .injection import (
    AdapterSet,
    InjectionSchedule,
    attach_adapters,
    default_schedule,
    save_adapter_checkpoint,
)
from .mrd import MrdConfig, downsample_mask, mrd_terms, perturb_mask

TRAIN_STATE_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_iters: int = 20000
    mrd: MrdConfig = field(default_factory=MrdConfig)
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 1000
    grad_accum: int = 1

    def __post_init__(self):
        # lr = 0 is allowed as a diagnostic no-op mode for freeze verification
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_iters < 1:
            raise ValueError("learning rate must be >= 0; batch size and max iters positive")
        if self.checkpoint_every < 1 or self.grad_accum < 1:
            raise ValueError("checkpoint_every and grad_accum must be positive")

    def to_dict(self) -> dict:
        obj = asdict(self)
        obj["betas"] = list(self.betas)
        return obj

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "mrd" in obj and isinstance(obj["mrd"], dict):
            obj["mrd"] = MrdConfig.from_dict(obj["mrd"])
        if "betas" in obj:
            obj["betas"] = tuple(obj["betas"])
        return cls(**obj)


@dataclass(frozen=True)
class FreezePolicy:
    trainable: tuple[str, ...]
    frozen: tuple[str, ...]


def _named_params(bundle: BackboneBundle, adapters: AdapterSet):
    for comp_name, module in bundle.named_components().items():
        for name, p in module.named_parameters():
            yield f"{comp_name}.{name}", p
    for name, p in adapters.named_parameters():
        yield f"adapters.{name}", p


def apply_freeze(bundle: BackboneBundle, adapters: AdapterSet) -> FreezePolicy:
    """Freeze every backbone parameter; train only projection/attention adapters."""
    bundle.freeze()
    for p in adapters.parameters():
        p.requires_grad_(True)
    trainable, frozen = [], []
    for name, p in _named_params(bundle, adapters):
        (trainable if p.requires_grad else frozen).append(name)
    return FreezePolicy(tuple(trainable), tuple(frozen))


def snapshot_params(bundle: BackboneBundle, adapters: AdapterSet) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in _named_params(bundle, adapters)}


@dataclass
class FreezeReport:
    ok: bool
    drifted_frozen: list[str]
    changed_trainable: list[str]
    notes: list[str]


def verify_freeze(
    before: dict[str, torch.Tensor], bundle: BackboneBundle, adapters: AdapterSet
) -> FreezeReport:
    """Frozen parameters must be bitwise unchanged; at least one trainable moved."""
    drifted, changed = [], []
    for name, p in _named_params(bundle, adapters):
        same = torch.equal(before[name], p.detach())
        if p.requires_grad:
            if not same:
                changed.append(name)
        elif not same:
            drifted.append(name)
    notes = []
    if drifted:
        notes.append(f"{len(drifted)} frozen tensors drifted")
    if not changed:
        notes.append("no-op training: no trainable parameter changed")
    return FreezeReport(not drifted and bool(changed), drifted, changed, notes)


@dataclass
class TrainBatch:
    images: torch.Tensor  # (B, C, H, W) in [0, 1]
    masks: np.ndarray  # (B, H, W) uint8 bits
    captions: list[str]


@dataclass
class TrainState:
    bundle: BackboneBundle
    noise_schedule: NoiseSchedule
    injection_schedule: InjectionSchedule
    adapters: AdapterSet
    adapted: torch.nn.Module
    optimizer: torch.optim.Optimizer
    policy: FreezePolicy
    torch_gen: torch.Generator
    np_rng: np.random.Generator
    iteration: int = 0
    micro: int = 0


@dataclass
class StepMetrics:
    loss: float
    omega_term: float
    base_term: float


def make_train_state(
    bundle: BackboneBundle,
    noise_schedule: NoiseSchedule,
    cfg: TrainConfig,
    injection_schedule: InjectionSchedule | None = None,
) -> TrainState:
    injection_schedule = injection_schedule or default_schedule()
    adapters = AdapterSet.build(
        bundle.denoiser.tap_points,
        injection_schedule,
        bundle.extractor.feature_channels,
        seed=cfg.seed,
    )
    policy = apply_freeze(bundle, adapters)
    adapted = attach_adapters(bundle.denoiser, injection_schedule, adapters)
    optimizer = torch.optim.AdamW(
        adapters.parameters(),
        lr=cfg.learning_rate,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    return TrainState(
        bundle=bundle,
        noise_schedule=noise_schedule,
        injection_schedule=injection_schedule,
        adapters=adapters,
        adapted=adapted,
        optimizer=optimizer,
        policy=policy,
        torch_gen=torch.Generator().manual_seed(cfg.seed),
        np_rng=np.random.default_rng(cfg.seed),
    )


def train_step(batch: TrainBatch, state: TrainState, cfg: TrainConfig) -> StepMetrics:
    """One optimization step: noise, predict through the adapted denoiser,
    blend the fresh perturbed-mask term with the plain term, update adapters."""
    masks_t = torch.from_numpy(batch.masks).to(batch.images.dtype)[:, None]
    x0, cond = build_conditioning(batch.images, masks_t, batch.captions, state.bundle)
    b = x0.shape[0]
    sched = state.noise_schedule
    t = torch.randint(1, sched.T + 1, (b,), generator=state.torch_gen)
    eps = torch.randn(x0.shape, generator=state.torch_gen, dtype=x0.dtype)
    x_t = add_noise(x0, eps, t, sched)
    eps_pred = state.adapted.predict(x_t, t, cond)

    factor = state.bundle.autoencoder.downsample_factor
    rows = []
    for i in range(b):
        perturbed = perturb_mask(BinaryMask(batch.masks[i]), cfg.mrd, state.np_rng)
        rows.append(downsample_mask(perturbed.bits, factor).bits)
    m_prime = torch.from_numpy(np.stack(rows)).to(x0.dtype)

    masked_term, base_term = mrd_terms(eps, eps_pred, m_prime)
    loss = base_term + cfg.mrd.omega * (masked_term - base_term)
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss at iteration {state.iteration + 1}: "
            f"masked={float(masked_term)} base={float(base_term)} "
            f"|x0|max={float(x0.abs().max())} |eps_pred|max={float(eps_pred.detach().abs().max())}"
        )
    (loss / cfg.grad_accum).backward()
    state.micro += 1
    if state.micro % cfg.grad_accum == 0:
        state.optimizer.step()
        state.optimizer.zero_grad()
    state.iteration += 1
    return StepMetrics(
        float(loss.detach()), float(masked_term.detach()), float(base_term.detach())
    )


def load_sample_arrays(
    record: SmokeSample, root: str | Path | None
) -> tuple[torch.Tensor, np.ndarray, str]:
    with Image.open(resolve_path(root, record.image_path)) as img:
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        tensor = torch.from_numpy(arr)[None]
    else:
        tensor = torch.from_numpy(arr).permute(2, 0, 1)
    if record.mask_path is None:
        raise ValueError(f"{record.id}: training requires a mask")
    mask = load_mask(resolve_path(root, record.mask_path))
    return tensor, mask.bits, record.caption


def _assemble(cache: dict, records: list[SmokeSample], idx: np.ndarray) -> TrainBatch:
    images = torch.stack([cache[records[i].id][0] for i in idx])
    masks = np.stack([cache[records[i].id][1] for i in idx])
    captions = [cache[records[i].id][2] for i in idx]
    return TrainBatch(images, masks, captions)


def _save_train_state(path: Path, state: TrainState, cfg: TrainConfig) -> None:
    payload = {
        "version": TRAIN_STATE_VERSION,
        "iteration": state.iteration,
        "micro": state.micro,
        "adapters": state.adapters.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "torch_rng": state.torch_gen.get_state(),
        "np_rng": json.dumps(state.np_rng.bit_generator.state),
        "config": cfg.to_dict(),
        "injection_schedule": state.injection_schedule.to_jsonable(),
        "noise_schedule": state.noise_schedule.to_json(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def _load_train_state(path: Path, state: TrainState, cfg: TrainConfig) -> int:
    try:
        payload = torch.load(path, weights_only=False)
        if payload["version"] != TRAIN_STATE_VERSION:
            raise ValueError(f"unsupported train-state version {payload['version']}")
        saved_cfg = dict(payload["config"])
        current = cfg.to_dict()
        for key in ("learning_rate", "batch_size", "seed", "mrd", "betas", "weight_decay"):
            if saved_cfg.get(key) != current.get(key):
                raise ValueError(f"config key {key!r} differs from the checkpointed run")
        state.adapters.load_state_dict(payload["adapters"])
        state.optimizer.load_state_dict(payload["optimizer"])
        state.torch_gen.set_state(payload["torch_rng"])
        state.np_rng.bit_generator.state = json.loads(payload["np_rng"])
        state.iteration = payload["iteration"]
        state.micro = payload["micro"]
        return state.iteration
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(
            f"cannot resume from {path} ({exc}); rerun with restart=True to discard it"
        ) from exc


def run_training(
    manifest: Manifest,
    cfg: TrainConfig,
    bundle: BackboneBundle,
    noise_schedule: NoiseSchedule,
    out_dir: str | Path,
    injection_schedule: InjectionSchedule | None = None,
    root: str | Path | None = None,
    restart: bool = False,
) -> Path:
    """Train adapters to cfg.max_iters with periodic checkpoints; resumable.

    Returns the path of the exported adapter checkpoint. A fixed config and
    seed reproduce the loss sequence exactly, across interruptions.
    """
    records = list(manifest)
    if not records:
        raise ValueError("training manifest is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = make_train_state(bundle, noise_schedule, cfg, injection_schedule)
    state_path = out_dir / "train_state.pt"
    start = 0
    if state_path.exists():
        if restart:
            state_path.unlink()
        else:
            start = _load_train_state(state_path, state, cfg)

    cache = {r.id: load_sample_arrays(r, root) for r in records}
    metrics_path = out_dir / "metrics.jsonl"
    t0 = time.monotonic()
    with open(metrics_path, "a", encoding="utf-8") as metrics:
        for it in range(start, cfg.max_iters):
            idx = state.np_rng.integers(0, len(records), size=cfg.batch_size)
            batch = _assemble(cache, records, idx)
            step = train_step(batch, state, cfg)
            metrics.write(
                json.dumps(
                    {
                        "iter": it + 1,
                        "loss": step.loss,
                        "omega_term": step.omega_term,
                        "base_term": step.base_term,
                        "lr": cfg.learning_rate,
                        "wallclock": round(time.monotonic() - t0, 4),
                    }
                )
                + "\n"
            )
            metrics.flush()
            if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.max_iters:
                _save_train_state(state_path, state, cfg)

    ckpt_path = out_dir / "adapters.pt"
    save_adapter_checkpoint(
        ckpt_path,
        state.adapters,
        bundle.extractor.feature_channels,
        extra={
            "train_iters": cfg.max_iters,
            "noise_schedule": noise_schedule.to_json(),
            "config": cfg.to_dict(),
        },
    )
    return ckpt_path

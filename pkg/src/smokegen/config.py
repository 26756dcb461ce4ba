"""Pipeline configuration: one TOML file with per-stage tables; CLI flags win.

Key tree (all optional, defaults below):

    [global]   seed, workers, data_root
    [prep]     seg_endpoint, cap_endpoint, max_tokens, stop_patterns, threshold
    [train]    learning_rate, batch_size, max_iters, checkpoint_every, grad_accum
    [train.mrd] omega, kernel_min, kernel_max, max_rounds, fixed_rounds, xor_difference
    [generate] guidance_scale, steps, masks_per_background, samples_per_pair
    [select]   fraction
    [score]    prompt, retries, outage_limit
    [export]   connectivity, threshold
    [eval]     window, gaussian
    [serve]    host, port
    [toy]      latent_size, T, pretrain_steps, width
"""

from __future__ import annotations

import hashlib
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict = {
    "global": {"seed": 0, "workers": 1, "data_root": "."},
    "prep": {
        "seg_endpoint": "",
        "cap_endpoint": "",
        "max_tokens": 20,
        "stop_patterns": [],
        "threshold": 128,
    },
    "train": {
        "learning_rate": 1e-4,
        "batch_size": 32,
        "max_iters": 20000,
        "checkpoint_every": 1000,
        "grad_accum": 1,
        "mrd": {
            "omega": 0.4,
            "kernel_min": 10,
            "kernel_max": 20,
            "max_rounds": 3,
            "fixed_rounds": False,
            "xor_difference": False,
        },
    },
    "generate": {
        "guidance_scale": 7.5,
        "steps": 50,
        "masks_per_background": 2,
        "samples_per_pair": 3,
    },
    "select": {"fraction": 0.5},
    "score": {"prompt": "", "retries": 1, "outage_limit": 5},
    "export": {"connectivity": 8, "threshold": 128},
    "eval": {"window": 8, "gaussian": False},
    "serve": {"host": "127.0.0.1", "port": 8008},
    "toy": {"latent_size": 8, "T": 100, "pretrain_steps": 400, "width": 16},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Defaults deep-merged with the TOML file when one is given."""
    if path is None:
        return _merge(DEFAULTS, {})
    with open(path, "rb") as fh:
        user = tomllib.load(fh)
    return _merge(DEFAULTS, user)


def config_hash(path: str | Path | None) -> str | None:
    if path is None:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def validate_config(cfg: dict, base_dir: str | Path | None = None) -> list[str]:
    """Range and reference checks; violations returned, not raised."""
    violations: list[str] = []

    def need(section, key, pred, describe):
        value = cfg.get(section, {}).get(key)
        if value is None or not pred(value):
            violations.append(f"[{section}] {key}: {describe} (got {value!r})")

    need("global", "seed", lambda v: isinstance(v, int), "must be an integer")
    need("global", "workers", lambda v: isinstance(v, int) and v >= 1, "must be >= 1")
    need("train", "learning_rate", lambda v: v > 0, "must be positive")
    need("train", "batch_size", lambda v: isinstance(v, int) and v >= 1, "must be >= 1")
    need("train", "max_iters", lambda v: isinstance(v, int) and v >= 1, "must be >= 1")
    mrd = cfg.get("train", {}).get("mrd", {})
    if not 0.0 <= mrd.get("omega", 0.4) <= 1.0:
        violations.append(f"[train.mrd] omega must lie in [0, 1] (got {mrd.get('omega')!r})")
    if not 1 <= mrd.get("kernel_min", 10) <= mrd.get("kernel_max", 20):
        violations.append("[train.mrd] need 1 <= kernel_min <= kernel_max")
    need("generate", "guidance_scale", lambda v: v >= 0, "must be >= 0")
    need("generate", "steps", lambda v: isinstance(v, int) and v >= 1, "must be >= 1")
    need(
        "generate",
        "masks_per_background",
        lambda v: isinstance(v, int) and v >= 0,
        "must be >= 0",
    )
    need("generate", "samples_per_pair", lambda v: isinstance(v, int) and v >= 1, "must be >= 1")
    need("select", "fraction", lambda v: 0 < v <= 1, "must lie in (0, 1]")
    need("export", "connectivity", lambda v: v in (4, 8), "must be 4 or 8")
    need("eval", "window", lambda v: isinstance(v, int) and v >= 2, "must be >= 2")
    need("serve", "port", lambda v: isinstance(v, int) and 0 < v < 65536, "must be a port")

    data_root = cfg.get("global", {}).get("data_root", ".")
    resolved = Path(base_dir or ".") / data_root if not Path(data_root).is_absolute() else Path(data_root)
    if not resolved.is_dir():
        violations.append(f"[global] data_root does not exist: {data_root}")
    return violations

"""Run configuration: a flat, typed key=value format shared by all commands.

A config file holds `key = value` lines (# comments allowed); every key
must match a RunConfig field and values are parsed against the field type.
Command-line overrides use the same `key=value` syntax. The config hash
embedded in checkpoints is computed over the canonical serialization.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_args, get_origin


@dataclass
class RunConfig:
    # episode shape
    way: int = 5
    shot: int = 1
    queries: int = 2  # per class, training
    eval_queries: int = 1  # per class, evaluation

    # video geometry and sampling
    num_frames: int = 20  # dense frames per clip (M)
    num_select: int = 8  # frames kept by the sampler (T)
    frame_size: int = 64
    scan_channels: int = 32
    scan_resolution: int = 32
    embed_channels: int = 64
    evaluator_hidden: int = 64

    # perturbed top-k and schedules
    noise_samples: int = 500
    sigma0: float = 0.1
    sigma_decay: float = 0.8
    sigma_decay_every: int = 4  # epochs
    sigma_floor: float = 1e-3
    optimizer: str = "adam"  # adam | sgd
    lr: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 10  # epochs
    momentum: float = 0.9
    head_lr: float = 1e-3  # MI estimator heads (their own optimizer)
    align_lr_scale: float = 0.1  # alignment heads learn slower than the embedding

    # loss weights
    mu1: float = 0.5
    mu2: float = 1.0

    # schedule
    epochs: int = 30
    episodes_per_epoch: int = 100
    align_warmup_epochs: int = 3  # alignment joins after the embedding warms up
    val_every: int = 0  # epochs between validation passes; 0 disables
    val_episodes: int = 50

    # module toggles
    sampler_on: bool = True
    ts_on: bool = True
    sa_on: bool = True
    ada_on: bool = True
    tc_on: bool = True
    sc_on: bool = True
    intra_on: bool = True
    inter_on: bool = True

    # spatial-offset exploration (training only)
    offset_perturb_std: float = 0.1

    # synthetic dataset; every split must hold at least `way` classes
    num_classes: int = 20
    split: tuple[int, int, int] = (9, 5, 6)
    clips_per_class: int = 40
    sprite_scale: float = 0.40
    length_min_frac: float = 0.5
    length_max_frac: float = 1.0
    offset_max: float = 0.25
    background_noise: float = 0.03
    data_seed: int = 0

    seed: int = 0

    def misalignment(self):
        from .data import MisalignmentDistribution

        return MisalignmentDistribution(
            length_range=(self.length_min_frac, self.length_max_frac),
            offset_max=self.offset_max,
            noise_level=self.background_noise,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS.get(name)
    if f is None:
        raise KeyError(f"unknown config key: {name!r}")
    raw = raw.strip()
    tp = f.type if not isinstance(f.type, str) else eval(f.type)  # noqa: S307 (dataclass annotations)
    if tp is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if get_origin(tp) is tuple:
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        args = get_args(tp)
        if len(parts) != len(args):
            raise ValueError(f"{name}: expected {len(args)} values, got {len(parts)}")
        return tuple(a(p.strip()) for a, p in zip(args, parts))
    return raw


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `key=value` strings; unknown keys or bad values raise."""
    updates = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        updates[key] = _parse_value(key, raw)
    return dataclasses.replace(cfg, **updates)


def load_config(path) -> RunConfig:
    """Parse a key=value config file into a RunConfig."""
    cfg = RunConfig()
    updates = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        updates[key] = _parse_value(key, raw)
    return dataclasses.replace(cfg, **updates)


def save_config(cfg: RunConfig, path) -> None:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n")


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]

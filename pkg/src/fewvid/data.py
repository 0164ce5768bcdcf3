"""Synthetic episodic video benchmark with controllable action misalignment.

A clip is M frames of a single moving sprite whose (motion pattern, shape)
pair defines its class. Misalignment knobs control where the action sits in
the clip (start/length), how it progresses (speed profile), where it sits
in the frame (spatial offset), and how noisy the background is. Frames
outside the action window contain only background plus a class-independent
distractor sprite, so pixels there carry no label information.

The misalignment parameters are retained on each clip for oracle checks;
models must consume clips through `episode_arrays`, which exposes frames
and labels only.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sprites

SPEED_PROFILES = ("identity", "ease_in", "ease_out")

BACKGROUND_LEVEL = 0.12


def apply_speed_profile(name: str, u: np.ndarray) -> np.ndarray:
    """Monotone bijection of [0, 1]; warps raw progress into action progress."""
    u = np.asarray(u, dtype=np.float64)
    if name == "identity":
        return u
    if name == "ease_in":
        return u * u
    if name == "ease_out":
        return 1.0 - (1.0 - u) ** 2
    raise ValueError(f"unknown speed profile: {name!r}")


@dataclass(frozen=True)
class ActionSpec:
    """Ground-truth definition of one action class."""

    class_id: int
    motion_pattern: str
    sprite_shape: str
    sprite_scale: float = 0.40

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0")
        if not 0.0 < self.sprite_scale <= 1.0:
            raise ValueError("sprite_scale must be in (0, 1]")


@dataclass(frozen=True)
class MisalignmentSpec:
    """Per-clip misalignment: when, how fast, and where the action happens."""

    action_start: int
    action_length: int
    speed_profile: str = "identity"
    spatial_offset: tuple[float, float] = (0.0, 0.0)
    background_noise_level: float = 0.0

    def validate(self, num_frames: int) -> None:
        if self.action_length < 1:
            raise ValueError("action_length must be >= 1")
        if not 0 <= self.action_start < num_frames:
            raise ValueError("action_start out of range")
        if self.action_start + self.action_length > num_frames:
            raise ValueError("action window overflows the clip")
        if self.speed_profile not in SPEED_PROFILES:
            raise ValueError(f"unknown speed profile: {self.speed_profile!r}")
        if not all(-0.5 <= v <= 0.5 for v in self.spatial_offset):
            raise ValueError("spatial_offset outside [-0.5, 0.5]^2")
        if self.background_noise_level < 0:
            raise ValueError("background_noise_level must be >= 0")

    def window(self) -> tuple[int, int]:
        return self.action_start, self.action_start + self.action_length


@dataclass
class VideoClip:
    """Dense frame sequence with its label and (oracle-only) misalignment."""

    frames: np.ndarray  # [M, H, W, C] float32 in [0, 1]
    label: int
    misalignment: MisalignmentSpec

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class EpisodeTask:
    """One N-way K-shot task: support and query clips with local labels."""

    support: list[VideoClip]
    query: list[VideoClip]
    way: int
    shot: int
    class_map: dict[int, int]  # global class id -> episode-local label

    def support_labels(self) -> list[int]:
        return [self.class_map[c.label] for c in self.support]

    def query_labels(self) -> list[int]:
        return [self.class_map[c.label] for c in self.query]


def episode_arrays(task: EpisodeTask):
    """Model-facing view of an episode: frames and local labels only.

    Returns (support_frames [N*K,M,H,W,C], support_labels [N*K],
    query_frames [N*Q,M,H,W,C], query_labels [N*Q]). Misalignment metadata
    is deliberately not reachable from here.
    """
    sx = np.stack([c.frames for c in task.support])
    qx = np.stack([c.frames for c in task.query])
    sy = np.asarray(task.support_labels(), dtype=np.int64)
    qy = np.asarray(task.query_labels(), dtype=np.int64)
    return sx, sy, qx, qy


def build_class_table(num_classes: int, seed: int = 0, sprite_scale: float = 0.40) -> list[ActionSpec]:
    """Assign distinct (pattern, shape) combinations to `num_classes` classes."""
    combos = [(p, s) for p in sprites.MOTION_PATTERNS for s in sprites.SPRITE_SHAPES]
    if num_classes > len(combos):
        raise ValueError(f"at most {len(combos)} distinct classes supported")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(combos))
    return [
        ActionSpec(class_id=i, motion_pattern=combos[j][0], sprite_shape=combos[j][1],
                   sprite_scale=sprite_scale)
        for i, j in enumerate(order[:num_classes])
    ]


def _render_background(num_frames, height, width, channels, noise_level, rng):
    frames = np.full((num_frames, height, width, channels), BACKGROUND_LEVEL, dtype=np.float64)
    if noise_level > 0:
        frames += noise_level * rng.standard_normal(frames.shape)
    return frames


def _draw_distractor(frames, idx, rng, height, width):
    """Hovering sprite on out-of-window frames; independent of the class.

    Smaller and dimmer than class sprites: out-of-window frames are
    interference, not class look-alikes.
    """
    shape = rng.choice(sprites.SPRITE_SHAPES)
    color = np.full(3, rng.uniform(0.35, 0.55))
    base = rng.uniform(0.3, 0.7, size=2)
    wobble = rng.uniform(0.03, 0.1)
    phase = rng.uniform(0, 2 * np.pi)
    radius = rng.uniform(0.07, 0.12) * min(height, width) / 2
    for rank, i in enumerate(idx):
        ang = phase + 2 * np.pi * rank / max(len(idx), 1)
        cx = (base[0] + wobble * np.cos(ang)) * (width - 1)
        cy = (base[1] + wobble * np.sin(ang)) * (height - 1)
        sprites.draw_sprite(frames[i], shape, (cx, cy), radius, color)


def render_clip(
    spec: ActionSpec,
    mis: MisalignmentSpec,
    rng: np.random.Generator,
    num_frames: int = 20,
    height: int = 64,
    width: int = 64,
    channels: int = 3,
) -> VideoClip:
    """Render one labeled clip.

    The class sprite appears only on frames inside the action window,
    progressing along its trajectory according to the speed profile and
    translated by the spatial offset. Frames outside the window get a
    class-independent distractor sprite instead.
    """
    if num_frames < 4:
        raise ValueError("clips need at least 4 frames")
    mis.validate(num_frames)
    frames = _render_background(num_frames, height, width, channels,
                                mis.background_noise_level, rng)

    # brightness-only variation: hue carries no information, so shape and
    # trajectory stay the only class evidence
    color = np.full(channels, rng.uniform(0.7, 1.0))
    lo, hi = mis.window()
    if mis.action_length == 1:
        raw = np.zeros(1)
    else:
        raw = np.arange(mis.action_length) / (mis.action_length - 1)
    progress = apply_speed_profile(mis.speed_profile, raw)
    sprites.render_trajectory_frames(
        frames[lo:hi], spec.motion_pattern, spec.sprite_shape, progress,
        mis.spatial_offset, spec.sprite_scale, color)

    outside = [i for i in range(num_frames) if not lo <= i < hi]
    if outside:
        _draw_distractor(frames, outside, rng, height, width)

    return VideoClip(frames=np.clip(frames, 0.0, 1.0).astype(np.float32),
                     label=spec.class_id, misalignment=mis)


@dataclass
class MisalignmentDistribution:
    """Sampling ranges for per-clip misalignment parameters.

    Defaults instantiate all three misalignment types: random start, length
    between 40% and 100% of the clip, offsets up to a quarter frame, and a
    mix of speed profiles.
    """

    length_range: tuple[float, float] = (0.4, 1.0)  # fraction of M
    offset_max: float = 0.25
    speed_profiles: tuple[str, ...] = SPEED_PROFILES
    noise_level: float = 0.03

    def sample(self, num_frames: int, rng: np.random.Generator) -> MisalignmentSpec:
        lo = max(1, int(round(self.length_range[0] * num_frames)))
        hi = max(lo, int(round(self.length_range[1] * num_frames)))
        length = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, num_frames - length + 1))
        off = rng.uniform(-self.offset_max, self.offset_max, size=2) if self.offset_max > 0 else np.zeros(2)
        profile = str(rng.choice(self.speed_profiles))
        return MisalignmentSpec(
            action_start=start, action_length=length, speed_profile=profile,
            spatial_offset=(float(off[0]), float(off[1])),
            background_noise_level=self.noise_level)

    @classmethod
    def aligned(cls, noise_level: float = 0.0) -> "MisalignmentDistribution":
        """Degenerate distribution: full-length, centered, uniform-speed actions."""
        return cls(length_range=(1.0, 1.0), offset_max=0.0,
                   speed_profiles=("identity",), noise_level=noise_level)


def split_classes(total_classes: int, ratios: tuple[int, int, int], seed: int = 0):
    """Deterministic disjoint (train, val, test) partition of class ids."""
    if sum(ratios) != total_classes:
        raise ValueError(f"ratios {ratios} must sum to {total_classes}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(total_classes)
    n_train, n_val, _ = ratios
    train = tuple(sorted(int(c) for c in order[:n_train]))
    val = tuple(sorted(int(c) for c in order[n_train:n_train + n_val]))
    test = tuple(sorted(int(c) for c in order[n_train + n_val:]))
    return train, val, test


def sample_episode(
    class_pool,
    way: int,
    shot: int,
    query_per_class: int,
    mis_distribution: MisalignmentDistribution,
    rng: np.random.Generator,
    class_table: list[ActionSpec] | None = None,
    num_frames: int = 20,
    height: int = 64,
    width: int = 64,
    bank: "ClipBank | None" = None,
) -> EpisodeTask:
    """Draw one N-way K-shot episode.

    Classes are drawn without replacement from `class_pool`; every clip gets
    its own misalignment draw. With a `bank`, clips are taken (without
    support/query overlap) from pre-rendered pools instead of being rendered
    on the fly, in which case `mis_distribution`/`class_table` are unused.
    """
    pool = sorted(class_pool)
    if len(pool) < way:
        raise ValueError(f"need at least {way} classes, got {len(pool)}")
    chosen = [pool[i] for i in rng.choice(len(pool), size=way, replace=False)]
    class_map = {c: i for i, c in enumerate(chosen)}

    support, query = [], []
    for c in chosen:
        if bank is not None:
            idx = rng.choice(bank.clips_per_class, size=shot + query_per_class, replace=False)
            support.extend(bank.get(c, i) for i in idx[:shot])
            query.extend(bank.get(c, i) for i in idx[shot:])
        else:
            spec = class_table[c]
            for bucket, count in ((support, shot), (query, query_per_class)):
                for _ in range(count):
                    mis = mis_distribution.sample(num_frames, rng)
                    bucket.append(render_clip(spec, mis, rng, num_frames, height, width))
    return EpisodeTask(support=support, query=query, way=way, shot=shot, class_map=class_map)


class ClipBank:
    """Pre-rendered pool of clips per class, for fast episode sampling."""

    def __init__(self, class_table, class_ids, clips_per_class,
                 mis_distribution, seed, num_frames=20, height=64, width=64):
        self.clips_per_class = clips_per_class
        self._clips: dict[int, list[VideoClip]] = {}
        for c in class_ids:
            rng = np.random.default_rng((seed, c))
            spec = class_table[c]
            self._clips[c] = [
                render_clip(spec, mis_distribution.sample(num_frames, rng), rng,
                            num_frames, height, width)
                for _ in range(clips_per_class)
            ]

    @property
    def class_ids(self):
        return sorted(self._clips)

    def get(self, class_id: int, index: int) -> VideoClip:
        return self._clips[class_id][index]


def save_episodes(directory, episodes: list[EpisodeTask], seeds: list[int] | None = None) -> None:
    """Persist episodes as per-episode .npz archives plus a replay manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, ep in enumerate(episodes):
        sx, sy, qx, qy = episode_arrays(ep)
        np.savez(directory / f"episode_{i:05d}.npz",
                 support=sx, support_labels=sy, query=qx, query_labels=qy)
        manifest.append({
            "episode": i,
            "seed": None if seeds is None else seeds[i],
            "way": ep.way,
            "shot": ep.shot,
            "class_ids": sorted(ep.class_map),
            "misalignment": [dataclasses.asdict(c.misalignment)
                             for c in ep.support + ep.query],
        })
    with open(directory / "manifest.jsonl", "w") as f:
        for rec in manifest:
            f.write(json.dumps(rec) + "\n")


def load_episode_arrays(directory, index: int):
    """Load one persisted episode back as model-facing arrays."""
    with np.load(Path(directory) / f"episode_{index:05d}.npz") as z:
        return z["support"], z["support_labels"], z["query"], z["query_labels"]

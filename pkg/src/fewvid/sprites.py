"""Anti-aliased sprite rasterization and parametric motion trajectories.

Everything here is plain numpy and purely functional: a frame is produced
from (shape, position, scale, color) with sub-pixel anti-aliasing, and a
trajectory maps action progress u in [0, 1] to a normalized center
position. Sub-pixel rendering matters because spatial offsets smaller than
one pixel must still change the image smoothly.
"""

from __future__ import annotations

import numpy as np

SQRT3 = np.sqrt(3.0)

# Normalized trajectory domain: centers stay inside [MARGIN, 1-MARGIN] so a
# sprite remains mostly visible before any spatial offset is applied.
MARGIN = 0.22


def _lin(u, a, b):
    return a + (b - a) * u


def _traj_sweep_lr(u):
    return _lin(u, MARGIN, 1 - MARGIN), 0.5


def _traj_sweep_rl(u):
    return _lin(u, 1 - MARGIN, MARGIN), 0.5


def _traj_sweep_tb(u):
    return 0.5, _lin(u, MARGIN, 1 - MARGIN)


def _traj_sweep_bt(u):
    return 0.5, _lin(u, 1 - MARGIN, MARGIN)


def _traj_diag_down(u):
    return _lin(u, MARGIN, 1 - MARGIN), _lin(u, MARGIN, 1 - MARGIN)


def _traj_diag_up(u):
    return _lin(u, MARGIN, 1 - MARGIN), _lin(u, 1 - MARGIN, MARGIN)


def _traj_arc(u):
    # half circle passing over the top of the frame
    ang = np.pi * (1 - u)
    return 0.5 + (0.5 - MARGIN) * np.cos(ang), 0.62 - (0.62 - MARGIN) * np.sin(ang)


def _traj_circle(u):
    ang = 2 * np.pi * u
    r = 0.5 - MARGIN
    return 0.5 + r * np.cos(ang), 0.5 + r * np.sin(ang)


def _traj_zigzag(u):
    # horizontal sweep with a 3-period triangle wave in y
    tri = 2 * np.abs(3 * u - np.floor(3 * u + 0.5))
    return _lin(u, MARGIN, 1 - MARGIN), _lin(tri, MARGIN, 1 - MARGIN)


def _traj_bounce(u):
    # two parabolic bounces while drifting right
    phase = (2 * u) % 1.0
    y = 1 - MARGIN - (1 - 2 * MARGIN) * 4 * phase * (1 - phase)
    return _lin(u, MARGIN, 1 - MARGIN), y


def _traj_figure_eight(u):
    ang = 2 * np.pi * u
    return 0.5 + (0.5 - MARGIN) * np.sin(ang), 0.5 + (0.5 - MARGIN) * np.sin(2 * ang) / 2


def _traj_pendulum(u):
    # swing around a pivot above the frame
    ang = np.pi / 2 + (np.pi / 3) * np.cos(2 * np.pi * u)
    return 0.5 + 0.55 * np.cos(ang), -0.1 + 0.55 * np.sin(ang) + 0.35


MOTION_PATTERNS = {
    "sweep_lr": _traj_sweep_lr,
    "sweep_rl": _traj_sweep_rl,
    "sweep_tb": _traj_sweep_tb,
    "sweep_bt": _traj_sweep_bt,
    "diag_down": _traj_diag_down,
    "diag_up": _traj_diag_up,
    "arc": _traj_arc,
    "circle": _traj_circle,
    "zigzag": _traj_zigzag,
    "bounce": _traj_bounce,
    "figure_eight": _traj_figure_eight,
    "pendulum": _traj_pendulum,
}

SPRITE_SHAPES = ("disk", "square", "diamond", "ring", "cross", "triangle")


def trajectory_position(pattern: str, u: float) -> tuple[float, float]:
    """Normalized (x, y) center of `pattern` at action progress u in [0, 1]."""
    fn = MOTION_PATTERNS.get(pattern)
    if fn is None:
        raise ValueError(f"unknown motion pattern: {pattern!r}")
    return fn(float(np.clip(u, 0.0, 1.0)))


def _shape_sdf(shape: str, dx: np.ndarray, dy: np.ndarray, radius: float) -> np.ndarray:
    """Signed distance (pixels) to the sprite boundary; negative inside."""
    if shape == "disk":
        return np.hypot(dx, dy) - radius
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - radius * 0.85
    if shape == "diamond":
        return (np.abs(dx) + np.abs(dy)) / SQRT3 * 1.22 - radius * 0.75
    if shape == "ring":
        return np.abs(np.hypot(dx, dy) - radius * 0.72) - radius * 0.3
    if shape == "cross":
        bar = radius * 0.36
        arm1 = np.maximum(np.abs(dx) - radius, np.abs(dy) - bar)
        arm2 = np.maximum(np.abs(dx) - bar, np.abs(dy) - radius)
        return np.minimum(arm1, arm2)
    if shape == "triangle":
        # up-pointing equilateral triangle as an intersection of half planes
        inr = radius * 0.55
        e1 = -dy - inr
        e2 = 0.5 * dy + (SQRT3 / 2) * dx - inr
        e3 = 0.5 * dy - (SQRT3 / 2) * dx - inr
        return np.maximum(e1, np.maximum(e2, e3))
    raise ValueError(f"unknown sprite shape: {shape!r}")


def draw_sprite(
    frame: np.ndarray,
    shape: str,
    center_xy: tuple[float, float],
    radius_px: float,
    color: np.ndarray,
    aa: float = 1.0,
) -> None:
    """Alpha-composite one anti-aliased sprite onto `frame` in place.

    frame: [H, W, C] float array; center_xy in pixel coordinates (x, y);
    color: length-C array. Coverage falls linearly from 1 to 0 across an
    `aa`-pixel band around the boundary.
    """
    h, w = frame.shape[:2]
    cx, cy = center_xy
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    d = _shape_sdf(shape, xs - cx, ys - cy, radius_px)
    alpha = np.clip(0.5 - d / aa, 0.0, 1.0)
    frame += alpha[:, :, None] * (color[None, None, :] - frame)


def render_trajectory_frames(
    frames: np.ndarray,
    pattern: str,
    shape: str,
    progress: np.ndarray,
    offset_xy: tuple[float, float],
    scale: float,
    color: np.ndarray,
) -> None:
    """Draw a sprite following `pattern` onto frames[i] at progress[i], in place.

    frames: [n, H, W, C]; progress: [n] values in [0, 1]; offset_xy is a
    normalized translation added to every trajectory position.
    """
    h, w = frames.shape[1:3]
    radius = scale * min(h, w) / 2.0
    for i, u in enumerate(progress):
        x, y = trajectory_position(pattern, u)
        cx = (x + offset_xy[0]) * (w - 1)
        cy = (y + offset_xy[1]) * (h - 1)
        draw_sprite(frames[i], shape, (cx, cy), radius, color)

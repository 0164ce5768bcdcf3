"""Lightweight scan network: frame-level features over the dense clip.

Frames are downscaled to a small working resolution, then encoded
independently (no cross-frame mixing), yielding per-frame feature maps plus
their spatial averages. The video-level summary is the frame-axis mean of
the per-frame maps. Strides keep the feature maps at 8x8 so the saliency
maps derived from them retain usable spatial resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

MIN_SCAN_RESOLUTION = 8


@dataclass
class FrameFeatures:
    per_frame: torch.Tensor  # [M, c, h, w]
    pooled: torch.Tensor  # [M, c]


@dataclass
class VideoSummary:
    g: torch.Tensor  # [c, h, w]


def frames_to_tensor(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """[M, H, W, C] numpy clip -> [M, C, H, W] torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 3, 1, 2))).to(dtype)


class ScanNetwork(nn.Module):
    """Three stride-(2,2,1) conv blocks over downscaled frames."""

    def __init__(self, in_channels: int = 3, channels: int = 32, scan_resolution: int = 32):
        super().__init__()
        if scan_resolution < MIN_SCAN_RESOLUTION:
            raise ValueError(
                f"scan_resolution must be >= {MIN_SCAN_RESOLUTION}, got {scan_resolution}")
        self.scan_resolution = scan_resolution
        self.channels = channels
        # group normalization keeps per-frame feature variance alive; without
        # it the cosine metric collapses to a constant direction at this scale
        self.blocks = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, stride=2, padding=1),
            nn.GroupNorm(4, channels),
            nn.ELU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1),
            nn.GroupNorm(4, channels),
            nn.ELU(),
            nn.Conv2d(channels, channels, 3, stride=1, padding=1),
            nn.ELU(),
        )

    def downscale(self, frames: torch.Tensor) -> torch.Tensor:
        """Average-pool frames down to the scan resolution (identity if equal)."""
        if frames.shape[-1] == self.scan_resolution and frames.shape[-2] == self.scan_resolution:
            return frames
        return F.adaptive_avg_pool2d(frames, self.scan_resolution)

    def forward(self, frames: torch.Tensor) -> FrameFeatures:
        return self.scan(frames)

    def scan(self, frames: torch.Tensor) -> FrameFeatures:
        """Encode a clip [M, C, H, W] into per-frame features.

        Each frame is processed independently; permuting input frames
        permutes the output rows identically.
        """
        per_frame = self.blocks(self.downscale(frames) - 0.5)
        return FrameFeatures(per_frame=per_frame, pooled=per_frame.mean(dim=(2, 3)))


def summarize(ff: FrameFeatures) -> VideoSummary:
    """Video-level representation: element-wise mean over the frame axis."""
    if ff.per_frame.shape[0] < 1:
        raise ValueError("need at least one frame")
    return VideoSummary(g=ff.per_frame.mean(dim=0))

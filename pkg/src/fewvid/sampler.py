"""Task-adaptive spatial-temporal video sampler.

The sampler turns an M-frame clip into T frames in three stages:

* temporal selection: an evaluator scores every frame (conditioned on the
  video summary plus a positional embedding), and the top-T scores are
  selected. Training uses a perturbed, differentiable top-k whose backward
  pass reuses the forward noise draws; inference uses exact hard top-k.
* spatial amplification: a per-frame saliency map (channel self-attention
  aggregated by a weight vector) drives separable inverse-cdf resampling
  that stretches salient regions and compresses the rest.
* task adaptation: a summary of the support set is encoded into a Gaussian
  (mean/variance) task feature via the reparameterization trick, from which
  unit-norm weights for the evaluator head and the saliency aggregator are
  generated per episode.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .scanner import FrameFeatures, ScanNetwork, VideoSummary, summarize

log = logging.getLogger(__name__)

SALIENCY_FLOOR = 0.01
TASK_FEATURE_DIM = 128


@dataclass
class SelectionMatrix:
    """[M, T] frame-selection indicator; soft columns are distributions."""

    indicator: torch.Tensor
    mode: str  # "soft" | "hard"

    def selected_indices(self) -> torch.Tensor:
        return self.indicator.argmax(dim=0)


@dataclass
class SaliencyMap:
    m: torch.Tensor  # [h, w] non-negative, floored
    upsampled: torch.Tensor  # [H, W]


@dataclass
class SamplingGrid:
    src_x: torch.Tensor  # [W] source x for each output column, non-decreasing
    src_y: torch.Tensor  # [H] source y for each output row, non-decreasing


@dataclass
class TaskSummary:
    mu: torch.Tensor  # [TASK_FEATURE_DIM]
    sigma: torch.Tensor  # [TASK_FEATURE_DIM], non-negative
    eps: torch.Tensor
    f_t: torch.Tensor  # mu + sigma * eps


@dataclass
class TaskParams:
    theta_ts: torch.Tensor  # [d], unit norm; evaluator output head
    theta_sa: torch.Tensor  # [c], unit norm; saliency channel aggregator


def positional_embedding(num_positions: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal embedding table [num_positions, dim]."""
    pos = torch.arange(num_positions, dtype=dtype)[:, None]
    i = torch.arange(0, dim, 2, dtype=dtype)[None, :]
    angles = pos / torch.pow(torch.tensor(10000.0, dtype=dtype), i / dim)
    pe = torch.zeros(num_positions, dim, dtype=dtype)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return pe


class FrameEvaluator(nn.Module):
    """Two-layer scorer: importance of each frame given the video summary.

    The output head weight can be replaced per episode by a task-generated
    vector; `base_head` is used when task adaptation is off.
    """

    def __init__(self, feature_dim: int, hidden_dim: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.w1 = nn.Linear(2 * feature_dim, hidden_dim)
        self.base_head = nn.Parameter(torch.randn(hidden_dim) / math.sqrt(hidden_dim))

    def score_batch(self, pooled_frames: torch.Tensor, pooled_summary: torch.Tensor,
                    head: torch.Tensor | None = None,
                    use_positions: bool = True) -> torch.Tensor:
        """Scores [B, M] from pooled frame features [B, M, c] and summaries [B, c]."""
        b, m, _ = pooled_frames.shape
        x = torch.cat([pooled_frames, pooled_summary[:, None, :].expand_as(pooled_frames)],
                      dim=2)  # [B, M, 2c]
        if use_positions:
            x = x + positional_embedding(m, x.shape[2], dtype=x.dtype).to(x.device)
        h = F.relu(self.w1(x))
        w2 = self.base_head if head is None else head
        if w2.shape[0] != self.hidden_dim:
            raise ValueError(f"head has dim {w2.shape[0]}, expected {self.hidden_dim}")
        return normalize_scores(h @ w2)

    def forward(self, ff: FrameFeatures, g: VideoSummary, head: torch.Tensor | None = None,
                use_positions: bool = True) -> torch.Tensor:
        """Importance scores [M] for one video, min-max normalized to [0, 1]."""
        pooled_g = g.g.mean(dim=(1, 2))  # [c]
        return self.score_batch(ff.pooled[None], pooled_g[None], head=head,
                                use_positions=use_positions)[0]


def normalize_scores(raw: torch.Tensor) -> torch.Tensor:
    """Min-max normalize each row to [0, 1]; a constant row maps to zeros."""
    lo = raw.amin(dim=-1, keepdim=True)
    hi = raw.amax(dim=-1, keepdim=True)
    return (raw - lo) / (hi - lo + 1e-12)


class _PerturbedTopK(torch.autograd.Function):
    """Expected one-hot selection under Gaussian score perturbations.

    Forward averages n hard top-k selections of (s + sigma * z). Backward
    estimates the Jacobian with the *same* noise draws:
    dI[m, t]/ds[v] = E[onehot(s + sigma z)[t, m] * z[v]] / sigma.

    Operates on a batch of score vectors s [B, M] -> indicators [B, M, k];
    one-hot matrices are never materialized (scatter/gather instead).
    """

    @staticmethod
    def forward(ctx, s, k, sigma, noise):
        b, m = s.shape
        n = noise.shape[1]
        perturbed = s[:, None, :] + sigma * noise  # [B, n, M]
        idx = perturbed.topk(k, dim=-1).indices.sort(dim=-1).values  # [B, n, k]
        # indicator[b, m, t] = (1/n) * #{j : idx[b, j, t] == m}
        flat = (idx * k + torch.arange(k, device=s.device)).reshape(b, n * k)
        indicator = s.new_zeros(b, m * k)
        indicator.scatter_add_(1, flat, s.new_full((b, n * k), 1.0 / n))
        ctx.save_for_backward(idx, noise)
        ctx.sigma = sigma
        return indicator.reshape(b, m, k)

    @staticmethod
    def backward(ctx, grad_out):
        idx, noise = ctx.saved_tensors
        b, n, k = idx.shape
        m = grad_out.shape[1]
        # coeff[b, j] = sum_t grad_out[b, idx[b, j, t], t]
        flat = (idx * k + torch.arange(k, device=idx.device)).reshape(b, n * k)
        coeff = grad_out.reshape(b, m * k).gather(1, flat).reshape(b, n, k).sum(dim=-1)
        grad_s = torch.einsum("bn,bnv->bv", coeff, noise) / (ctx.sigma * n)
        return grad_s, None, None, None


def perturbed_topk_batch(s: torch.Tensor, k: int, sigma: float, n_samples: int,
                         generator: torch.Generator | None = None) -> torch.Tensor:
    """Differentiable soft top-k for a batch of score vectors [B, M]."""
    if k > s.shape[-1]:
        raise ValueError(f"cannot select {k} of {s.shape[-1]} frames")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if n_samples < 1:
        raise ValueError("need at least one noise sample")
    noise = torch.randn(s.shape[0], n_samples, s.shape[-1], dtype=s.dtype,
                        device=s.device, generator=generator)
    return _PerturbedTopK.apply(s, k, float(sigma), noise)


def perturbed_topk(s: torch.Tensor, k: int, sigma: float, n_samples: int,
                   generator: torch.Generator | None = None) -> SelectionMatrix:
    """Differentiable soft top-k of a single score vector s [M]."""
    indicator = perturbed_topk_batch(s[None], k, sigma, n_samples, generator=generator)
    return SelectionMatrix(indicator=indicator[0], mode="soft")


def hard_topk_batch(s: torch.Tensor, k: int) -> torch.Tensor:
    """Exact top-k indicators [B, M, k]; ties broken toward the lower index."""
    b, m = s.shape
    if k > m:
        raise ValueError(f"cannot select {k} of {m} frames")
    order = torch.argsort(-s, dim=1, stable=True)  # stable: lower index wins ties
    idx = order[:, :k].sort(dim=1).values  # [B, k]
    indicator = s.new_zeros(b, m, k)
    cols = torch.arange(k, device=s.device).expand(b, k)
    indicator[torch.arange(b, device=s.device)[:, None], idx, cols] = 1.0
    return indicator


def hard_topk(s: torch.Tensor, k: int) -> SelectionMatrix:
    """Exact top-k selection of a single score vector [M]."""
    return SelectionMatrix(indicator=hard_topk_batch(s[None], k)[0], mode="hard")


def select_frames(sel: SelectionMatrix, frames: torch.Tensor) -> torch.Tensor:
    """Gather (or softly mix) frames [M, ...] into [T, ...] via the indicator."""
    return torch.einsum("mt,m...->t...", sel.indicator, frames)


def uniform_selection(num_frames: int, k: int, dtype=torch.float32) -> SelectionMatrix:
    """Evenly spaced hard selection; the no-sampler fallback."""
    idx = torch.round(torch.linspace(0, num_frames - 1, k)).long()
    indicator = torch.zeros(num_frames, k, dtype=dtype)
    indicator[idx, torch.arange(k)] = 1.0
    return SelectionMatrix(indicator=indicator, mode="hard")


def saliency_maps_batch(features: torch.Tensor, w_s: torch.Tensor,
                        out_size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Channel self-attention saliency for a batch of frame features.

    features: [B, c, h, w]; w_s: [c]. Returns (maps [B, h, w],
    upsampled [B, H, W]). Each map is rectified and floored at 1% of its
    peak; an all-nonpositive map degrades to uniform.
    """
    if not torch.isfinite(features).all():
        raise ValueError("non-finite feature values")
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    attn = flat @ flat.transpose(1, 2) / math.sqrt(h * w)  # [B, c, c]
    attended = attn @ flat  # [B, c, h*w]
    m = torch.einsum("c,bcx->bx", w_s, attended).reshape(b, h, w) / c
    m = m.clamp(min=0)
    peak = m.amax(dim=(1, 2), keepdim=True)
    uniform = torch.ones_like(m)
    m = torch.where(peak > 0, m + SALIENCY_FLOOR * peak, uniform)
    upsampled = F.interpolate(m[:, None], size=out_size, mode="bilinear",
                              align_corners=True)[:, 0]
    return m, upsampled


def saliency_map(feature: torch.Tensor, w_s: torch.Tensor,
                 out_size: tuple[int, int]) -> SaliencyMap:
    """Frame saliency from scan features via channel self-attention.

    feature: [c, h, w]; w_s: [c] channel aggregation weights. The attended
    maps are averaged with w_s, rectified, and floored at 1% of the peak so
    downstream density grids never see zero mass.
    """
    m, upsampled = saliency_maps_batch(feature[None], w_s, out_size)
    return SaliencyMap(m=m[0], upsampled=upsampled[0])


def _inverse_cdf_positions(profiles: torch.Tensor) -> torch.Tensor:
    """Source coordinates whose density matches each 1D profile.

    profiles: [B, n] strictly positive weights at pixel centers 0..n-1.
    Builds the trapezoid cumulative mass at the centers, normalizes it, and
    maps n evenly spaced cdf values back through the piecewise-linear
    inverse. Endpoints land exactly on 0 and n-1, and a uniform profile
    returns the identity positions.
    """
    b, n = profiles.shape
    seg = 0.5 * (profiles[:, :-1] + profiles[:, 1:])  # [B, n-1] mass per cell
    cdf = torch.cat([profiles.new_zeros(b, 1), torch.cumsum(seg, dim=1)], dim=1)
    cdf = cdf / cdf[:, -1:]
    targets = torch.linspace(0, 1, n, dtype=profiles.dtype, device=profiles.device)
    targets = targets.expand(b, n)
    # bucket of each target: largest k with cdf[k] <= t (clamped to a valid segment)
    k = torch.searchsorted(cdf.detach().contiguous(), targets.contiguous(), right=True) - 1
    k = k.clamp(0, n - 2)
    c0 = cdf.gather(1, k)
    c1 = cdf.gather(1, k + 1)
    src = k.to(profiles.dtype) + (targets - c0) / (c1 - c0 + 1e-12)
    return src.clamp(0, n - 1)


def build_grids_batch(saliency: torch.Tensor,
                      floor_frac: float = SALIENCY_FLOOR) -> tuple[torch.Tensor, torch.Tensor]:
    """Separable sampling grids for a batch of 2D saliency maps [B, H, W].

    Returns (src_x [B, W], src_y [B, H]). Each axis profile is the max over
    the other axis, floored at `floor_frac` of its peak; source coordinates
    are the inverse of the profile's cumulative distribution, so dense
    (salient) regions receive more output samples.
    """
    if saliency.min() < 0:
        raise ValueError("saliency must be non-negative")
    out = []
    for axis in (1, 2):  # max over rows -> x profile; max over cols -> y profile
        p = saliency.amax(dim=axis)
        peak = p.amax(dim=1, keepdim=True)
        if (peak <= 0).any():
            raise ValueError("saliency has zero total mass")
        out.append(_inverse_cdf_positions(p + floor_frac * peak))
    return out[0], out[1]


def build_grid(saliency: torch.Tensor, floor_frac: float = SALIENCY_FLOOR) -> SamplingGrid:
    """Separable sampling grid from a single 2D saliency map [H, W]."""
    src_x, src_y = build_grids_batch(saliency[None], floor_frac)
    return SamplingGrid(src_x=src_x[0], src_y=src_y[0])


def _interp_batch(values: torch.Tensor, coords: torch.Tensor, dim: int) -> torch.Tensor:
    """Per-item linear interpolation along `dim` of values [B, C, H, W].

    coords: [B, n] fractional positions targeting axis `dim` (2 = rows,
    3 = columns).
    """
    n = values.shape[dim]
    lo = coords.detach().floor().clamp(0, n - 1).long()
    hi = (lo + 1).clamp(max=n - 1)
    w = (coords - lo.to(coords.dtype)).clamp(0, 1)
    shape = [coords.shape[0], 1, 1, 1]
    shape[dim] = coords.shape[1]
    idx_shape = list(values.shape)
    idx_shape[dim] = coords.shape[1]
    lo = lo.reshape(shape).expand(idx_shape)
    hi = hi.reshape(shape).expand(idx_shape)
    w = w.reshape(shape)
    return values.gather(dim, lo) * (1 - w) + values.gather(dim, hi) * w


def amplify_batch(frames: torch.Tensor, src_x: torch.Tensor,
                  src_y: torch.Tensor) -> torch.Tensor:
    """Resample frames [B, C, H, W] through per-frame separable grids."""
    out = _interp_batch(frames, src_x, dim=3)
    return _interp_batch(out, src_y, dim=2)


def amplify(frame: torch.Tensor, grid: SamplingGrid) -> torch.Tensor:
    """Resample a frame [C, H, W] through the grid with bilinear interpolation.

    output[:, i, j] reads the input at (src_y[i], src_x[j]); an identity
    grid reproduces the input exactly. Differentiable in both the frame and
    the grid coordinates.
    """
    return amplify_batch(frame[None], grid.src_x[None], grid.src_y[None])[0]


class TaskEncoder(nn.Module):
    """Gaussian summary of an episode's support set.

    Per-clip pooled summaries go through a two-layer head that predicts a
    mean and (softplus) standard deviation; clip statistics are averaged,
    then a task feature is drawn via the reparameterization trick. At
    evaluation time eps = 0 for determinism.
    """

    def __init__(self, feature_dim: int, out_dim: int = TASK_FEATURE_DIM):
        super().__init__()
        self.out_dim = out_dim
        self.net = nn.Sequential(
            nn.Linear(feature_dim, out_dim),
            nn.ELU(),
            nn.Linear(out_dim, 2 * out_dim),
        )

    def forward(self, support_summaries: list[VideoSummary], train: bool = True,
                generator: torch.Generator | None = None) -> TaskSummary:
        if not support_summaries:
            raise ValueError("need at least one support summary")
        pooled = torch.stack([s.g.mean(dim=(1, 2)) for s in support_summaries])  # [NK, c]
        stats = self.net(pooled).mean(dim=0)  # [2 * out_dim]
        mu = stats[: self.out_dim]
        sigma = F.softplus(stats[self.out_dim:])
        if train:
            eps = torch.randn(self.out_dim, dtype=mu.dtype, device=mu.device,
                              generator=generator)
        else:
            eps = torch.zeros_like(mu)
        return TaskSummary(mu=mu, sigma=sigma, eps=eps, f_t=mu + sigma * eps)


class ParamGenerator(nn.Module):
    """Generates unit-norm task-specific weights for the evaluator head and
    the saliency aggregator from the task feature."""

    def __init__(self, evaluator_dim: int, saliency_dim: int, task_dim: int = TASK_FEATURE_DIM):
        super().__init__()
        self.gen_ts = nn.Linear(task_dim, evaluator_dim, bias=False)
        self.gen_sa = nn.Linear(task_dim, saliency_dim, bias=False)

    def forward(self, f_t: torch.Tensor) -> TaskParams:
        return TaskParams(theta_ts=self._normalize(self.gen_ts(f_t)),
                          theta_sa=self._normalize(self.gen_sa(f_t)))

    @staticmethod
    def _normalize(v: torch.Tensor) -> torch.Tensor:
        norm = v.norm()
        if norm < 1e-6:
            log.warning("degenerate task parameter norm %.3e", float(norm))
        return v / (norm + 1e-8)


@dataclass
class SampledVideo:
    frames: torch.Tensor  # [T, C, H, W]
    features: torch.Tensor  # [T, c, h, w] scan features of the selected frames
    diagnostics: dict


class VideoSampler(nn.Module):
    """Full sampling pipeline: scan, score, select, amplify.

    `select_temporal` and `amplify_spatial` gate the two stages; with both
    off this reduces to uniform frame selection. Soft selection mixes both
    the frames and their scan features with the same indicator so the
    spatial stage stays consistent with the temporal one during training.
    """

    def __init__(self, scan_net: ScanNetwork, num_select: int = 8,
                 evaluator_hidden: int = 64, noise_samples: int = 500):
        super().__init__()
        self.scan_net = scan_net
        self.num_select = num_select
        self.noise_samples = noise_samples
        self.evaluator = FrameEvaluator(scan_net.channels, evaluator_hidden)
        # positive init: an all-negative aggregate would rectify to a uniform
        # map with no gradient back into these weights
        self.base_saliency_weights = nn.Parameter(
            torch.rand(scan_net.channels) / math.sqrt(scan_net.channels) + 0.05)

    @staticmethod
    def _fill(base: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
        """Install a task-generated weight vector into a layer.

        The generated unit vector modulates the learned base weight rather
        than replacing it outright: a full replacement makes early-training
        selection behavior swing with the (still meaningless) task features
        and is unstable at this scale. The result is re-normalized.
        """
        v = base + generated
        return v / (v.norm() + 1e-8)

    def sample_batch(self, clips: torch.Tensor, *, mode: str = "eval",
                     sigma: float = 0.1, task: TaskParams | None = None,
                     select_temporal: bool = True, amplify_spatial: bool = True,
                     per_frame: torch.Tensor | None = None,
                     pooled: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> SampledVideo:
        """Sample `num_select` frames from each clip in a batch [B, M, C, H, W].

        `per_frame` [B, M, c, h, w] and `pooled` [B, M, c] may carry a
        precomputed scan of the clips; otherwise the clips are scanned here.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        b, m, _, height, width = clips.shape
        if per_frame is None:
            ff = self.scan_net.scan(clips.reshape(b * m, *clips.shape[2:]))
            per_frame = ff.per_frame.reshape(b, m, *ff.per_frame.shape[1:])
            pooled = ff.pooled.reshape(b, m, -1)
        diagnostics: dict = {"dense_pooled": pooled}

        if select_temporal:
            head = None if task is None else self._fill(self.evaluator.base_head,
                                                        task.theta_ts)
            scores = self.evaluator.score_batch(pooled, pooled.mean(dim=1), head=head)
            if mode == "train":
                indicator = perturbed_topk_batch(scores, self.num_select, sigma,
                                                 self.noise_samples, generator=generator)
            else:
                indicator = hard_topk_batch(scores, self.num_select)
            diagnostics["scores"] = scores
        else:
            single = uniform_selection(m, self.num_select, dtype=clips.dtype).indicator
            indicator = single[None].expand(b, m, self.num_select)
        diagnostics["indicator"] = indicator
        diagnostics["selected"] = indicator.argmax(dim=1)

        frames = torch.einsum("bmt,bmchw->btchw", indicator, clips)
        feats = torch.einsum("bmt,bmchw->btchw", indicator, per_frame)

        if amplify_spatial:
            w_s = (self.base_saliency_weights if task is None
                   else self._fill(self.base_saliency_weights, task.theta_sa))
            t = self.num_select
            _, upsampled = saliency_maps_batch(feats.reshape(b * t, *feats.shape[2:]),
                                               w_s, (height, width))
            src_x, src_y = build_grids_batch(upsampled)
            warped = amplify_batch(frames.reshape(b * t, *frames.shape[2:]), src_x, src_y)
            frames = warped.reshape(b, t, *warped.shape[1:])
            diagnostics["saliency"] = upsampled.reshape(b, t, height, width)
            diagnostics["grid_x"] = src_x.reshape(b, t, -1)
            diagnostics["grid_y"] = src_y.reshape(b, t, -1)

        return SampledVideo(frames=frames, features=feats, diagnostics=diagnostics)

    def forward(self, clip: torch.Tensor, *, mode: str = "eval", sigma: float = 0.1,
                task: TaskParams | None = None, select_temporal: bool = True,
                amplify_spatial: bool = True, features: FrameFeatures | None = None,
                generator: torch.Generator | None = None) -> SampledVideo:
        """Sample `num_select` frames from a single clip [M, C, H, W]."""
        per_frame = pooled = None
        if features is not None:
            per_frame, pooled = features.per_frame[None], features.pooled[None]
        out = self.sample_batch(clip[None], mode=mode, sigma=sigma, task=task,
                                select_temporal=select_temporal,
                                amplify_spatial=amplify_spatial,
                                per_frame=per_frame, pooled=pooled,
                                generator=generator)
        return SampledVideo(
            frames=out.frames[0], features=out.features[0],
            diagnostics={k: v[0] if isinstance(v, torch.Tensor) else v
                         for k, v in out.diagnostics.items()})

"""Spatial-temporal action alignment between support and query features.

Alignment runs in two stages on embedded frame sequences. The temporal
stage first applies a learned affine warp along the time axis (locating the
action's duration), then rearranges the query's timesteps against the
support's with a row-stochastic evolution matrix (matching action phases).
The spatial stage predicts a per-timestep offset between the two videos and
pools each feature map over the implied intersection region with a smooth
mask, so the comparison looks at the same part of the scene on both sides.

All heads initialize at the identity (warp (1, 0), zero offsets) so an
untrained model aligns a video to itself exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)


@dataclass
class VideoFeature:
    F: torch.Tensor  # [C, T, H', W']


@dataclass
class WarpParams:
    a: torch.Tensor  # scale
    b: torch.Tensor  # shift (fraction of the clip)

    @classmethod
    def identity(cls, dtype=torch.float32):
        return cls(a=torch.ones((), dtype=dtype), b=torch.zeros((), dtype=dtype))


@dataclass
class AlignDiagnostics:
    phi_s: WarpParams
    phi_q: WarpParams
    evolution: torch.Tensor  # [T, T] row-stochastic
    offsets: torch.Tensor  # [T, 2] in [-1, 1]


@dataclass
class AlignedPair:
    support: torch.Tensor  # [C', T]
    query: torch.Tensor  # [C', T]
    diagnostics: AlignDiagnostics


class EmbedNetwork(nn.Module):
    """Per-frame convolutional embedding producing [C, T, 8, 8] features."""

    def __init__(self, in_channels: int = 3, channels: int = 64):
        super().__init__()
        self.channels = channels
        c4, c2 = channels // 4, channels // 2
        # group normalization after each downsampling conv: keeps feature
        # variance alive so the cosine metric cannot collapse to a constant
        self.blocks = nn.Sequential(
            nn.Conv2d(in_channels, c4, 3, stride=2, padding=1),
            nn.GroupNorm(2, c4),
            nn.ELU(),
            nn.Conv2d(c4, c2, 3, stride=2, padding=1),
            nn.GroupNorm(2, c2),
            nn.ELU(),
            nn.Conv2d(c2, channels, 3, stride=2, padding=1),
            nn.GroupNorm(4, channels),
            nn.ELU(),
            nn.Conv2d(channels, channels, 3, stride=1, padding=1),
            nn.ELU(),
        )

    def forward(self, frames: torch.Tensor) -> VideoFeature:
        return self.embed(frames)

    def embed_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """Encode a flat frame batch [N, C_in, H, W] -> [N, C, h, w]."""
        return self.blocks(frames - 0.5)

    def embed(self, frames: torch.Tensor) -> VideoFeature:
        """frames [T, C_in, H, W] -> VideoFeature [C, T, h, w], frame-wise."""
        return VideoFeature(F=self.embed_frames(frames).permute(1, 0, 2, 3))


class TemporalWarpHead(nn.Module):
    """Predicts affine warp parameters (a, b) from a video feature.

    The final layer is zero-initialized with bias (1, 0): training starts
    at the identity warp.
    """

    def __init__(self, channels: int, hidden: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 2)
        nn.init.zeros_(self.fc2.weight)
        with torch.no_grad():
            self.fc2.bias.copy_(torch.tensor([1.0, 0.0]))

    def forward(self, feature: VideoFeature) -> WarpParams:
        pooled = feature.F.mean(dim=(1, 2, 3))  # [C]
        out = self.fc2(F.elu(self.fc1(pooled)))
        return WarpParams(a=out[0], b=out[1])


def temporal_transform(feature: VideoFeature, phi: WarpParams) -> VideoFeature:
    """Warp a feature along time: output step t reads source a*t + b*T.

    Positions are linearly interpolated with border clamping; phi = (1, 0)
    reproduces the input exactly, and b = k/T shifts by exactly k steps.
    """
    f = feature.F
    t = f.shape[1]
    if t < 2:
        raise ValueError("temporal warp needs T >= 2")
    steps = torch.arange(t, dtype=f.dtype, device=f.device)
    src = (phi.a * steps + phi.b * t).clamp(0, t - 1)
    # non-finite warp params must surface as non-finite outputs (caught by
    # the trainer's divergence guard), not as an indexing crash
    safe = torch.nan_to_num(src.detach(), nan=0.0, posinf=0.0, neginf=0.0)
    lo = safe.floor().clamp(0, t - 1).long()
    hi = (lo + 1).clamp(max=t - 1)
    w = (src - lo.to(src.dtype)).clamp(0, 1)
    warped = f.index_select(1, lo) * (1 - w)[None, :, None, None] \
        + f.index_select(1, hi) * w[None, :, None, None]
    return VideoFeature(F=warped)


class EvolutionRearrange(nn.Module):
    """Cross-attention over timesteps: match query evolution to support.

    A learnable diagonal logit bias starts the correlation near identity,
    so rearrangement does no harm before the embedding becomes informative
    and learns to deviate as cross-video structure emerges.
    """

    def __init__(self, channels: int, diag_bias: float = 3.0):
        super().__init__()
        self.channels = channels
        self.key = nn.Linear(channels, channels, bias=False)
        self.query = nn.Linear(channels, channels, bias=False)
        self.value = nn.Linear(channels, channels, bias=False)
        self.diag_bias = nn.Parameter(torch.tensor(diag_bias))
        with torch.no_grad():  # near-identity value projection at init
            self.value.weight.copy_(torch.eye(channels) + 0.01 * self.value.weight)

    def evolution_logits(self, keyed_s: torch.Tensor, queried_q: torch.Tensor) -> torch.Tensor:
        """[..., T, T] attention logits from projected [..., T, C] features."""
        t = keyed_s.shape[-2]
        scores = keyed_s @ queried_q.transpose(-2, -1) / math.sqrt(self.channels)
        eye = torch.eye(t, dtype=scores.dtype, device=scores.device)
        return scores + self.diag_bias * eye

    def evolution_matrix(self, pooled_s: torch.Tensor, pooled_q: torch.Tensor) -> torch.Tensor:
        """Row-stochastic [T, T] correlation between support/query timesteps.

        pooled_s, pooled_q: [T, C] spatially pooled features.
        """
        return torch.softmax(self.evolution_logits(self.key(pooled_s),
                                                   self.query(pooled_q)), dim=1)

    def forward(self, hat_s: VideoFeature, hat_q: VideoFeature):
        """Returns (proj_s [C, T], rearranged_q [C, T], evolution [T, T])."""
        if hat_s.F.shape != hat_q.F.shape:
            raise ValueError("support/query feature shapes differ")
        pooled_s = hat_s.F.mean(dim=(2, 3)).T  # [T, C]
        pooled_q = hat_q.F.mean(dim=(2, 3)).T
        evo = self.evolution_matrix(pooled_s, pooled_q)
        tilde_s = self.value(pooled_s).T  # [C, T]
        tilde_q = (evo @ self.value(pooled_q)).T
        return tilde_s, tilde_q, evo


class OffsetPredictor(nn.Module):
    """Per-timestep spatial offset between paired videos, squashed to [-1, 1].

    Zero-initialized final layer: offsets start at zero.
    """

    def __init__(self, channels: int, hidden: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.fc2 = nn.Linear(hidden, 2)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, tilde_s: torch.Tensor, tilde_q: torch.Tensor) -> torch.Tensor:
        """tilde_s, tilde_q: [C, T] -> offsets [T, 2]."""
        x = torch.cat([tilde_s, tilde_q], dim=0).T  # [T, 2C]
        return torch.tanh(self.fc2(F.elu(self.fc1(x))))


def _axis_profiles(extent: int, shifts: torch.Tensor, ramp: float) -> torch.Tensor:
    """Batched 1D intersection profiles [B, extent] for pixel shifts [B].

    The intersection of [0, extent-1] with itself shifted by `shift` is
    [max(0, shift), min(extent-1, extent-1+shift)], collapsing to a
    one-pixel band at the border for |shift| > extent-1. The profile is 1
    inside that interval with a `ramp`-cell cosine edge falling to 0.
    """
    n = extent - 1
    lo = shifts.clamp(min=0).clamp(max=n)
    hi = (n + shifts.clamp(max=0)).clamp(min=0)
    hi = torch.maximum(hi, lo.detach())
    x = torch.arange(extent, dtype=shifts.dtype, device=shifts.device)
    dist = torch.maximum(lo[:, None] - x, x - hi[:, None]).clamp(min=0)
    return 0.5 * (1 + torch.cos(math.pi * (dist / ramp).clamp(max=1.0)))


def intersection_masks(offsets: torch.Tensor, height: int, width: int,
                       ramp: float = 1.0) -> torch.Tensor:
    """Smooth intersection masks [B, height, width] for normalized offsets [B, 2].

    Offsets live in [-1, 1]^2, scaled so |o| = 1 shifts by the full map
    extent; masks are separable products of per-axis profiles and are
    differentiable w.r.t. the offsets.
    """
    px = _axis_profiles(width, offsets[:, 0] * width, ramp)
    py = _axis_profiles(height, offsets[:, 1] * height, ramp)
    return py[:, :, None] * px[:, None, :]


def offset_mask(o: torch.Tensor, height: int, width: int, ramp: float = 1.0) -> torch.Tensor:
    """Single intersection mask [height, width] for one offset o [2]."""
    return intersection_masks(o[None], height, width, ramp)[0]


def spatial_pool_batch(
    features: torch.Tensor,
    offsets: torch.Tensor,
    sign: int = 1,
    perturb_std: float = 0.0,
    perturb_copies: int = 4,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mask-weighted spatial average: [B, C, T, H', W'] -> [B, C, T].

    Each timestep is pooled under the intersection mask of sign * offset;
    a degenerate (near-zero) mask falls back to the global average. With
    perturb_std > 0 the result is averaged over `perturb_copies`
    Gaussian-perturbed offsets (training-time exploration).
    """
    b, c, t, height, width = features.shape
    if offsets.shape != (b, t, 2):
        raise ValueError(f"offsets must be [{b}, {t}, 2]")
    if perturb_std > 0:
        noise = perturb_std * torch.randn(b, perturb_copies, t, 2, dtype=offsets.dtype,
                                          device=offsets.device, generator=generator)
        variants = (offsets[:, None] + noise).clamp(-1, 1)
    else:
        variants = offsets[:, None]

    p = variants.shape[1]
    masks = intersection_masks((sign * variants).reshape(b * p * t, 2), height, width)
    masks = masks.reshape(b, p, t, height, width)
    totals = masks.sum(dim=(3, 4))  # [B, P, T]
    pooled = torch.einsum("bcthw,bpthw->bpct", features, masks)
    fallback = features.mean(dim=(3, 4))[:, None].expand(b, p, c, t)
    degenerate = totals < 1e-6
    if degenerate.any():
        log.warning("degenerate intersection mask; using global average")
    pooled = torch.where(degenerate[:, :, None, :], fallback,
                         pooled / totals.clamp(min=1e-6)[:, :, None, :])
    return pooled.mean(dim=1)


def spatial_pool(
    feature: torch.Tensor,
    offsets: torch.Tensor,
    sign: int = 1,
    perturb_std: float = 0.0,
    perturb_copies: int = 4,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Mask-weighted spatial average of one video: [C, T, H', W'] -> [C, T]."""
    return spatial_pool_batch(feature[None], offsets[None], sign=sign,
                              perturb_std=perturb_std, perturb_copies=perturb_copies,
                              generator=generator)[0]


@dataclass
class PreparedVideo:
    """Per-video alignment state reused across pairings.

    hat: (optionally) temporally warped feature; keyed/queried/valued are
    the pooled [T, C] projections; value_maps carries the value projection
    applied to the spatial maps (pooling them reproduces `valued`).
    """

    hat: VideoFeature
    phi: WarpParams
    pooled: torch.Tensor  # [T, C]
    keyed: torch.Tensor | None
    queried: torch.Tensor | None
    valued: torch.Tensor | None
    value_maps: torch.Tensor | None  # [C, T, H', W']


class AlignmentModel(nn.Module):
    """Composes warping, rearrangement, and offset pooling into one step."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.channels = channels
        self.warp_head = TemporalWarpHead(channels)
        self.rearrange = EvolutionRearrange(channels)
        self.offset_head = OffsetPredictor(channels)

    def prepare(self, feat: VideoFeature, use_temporal: bool = True) -> PreparedVideo:
        """Warp a video and cache its pooled projections for pairing."""
        if use_temporal:
            phi = self.warp_head(feat)
            hat = temporal_transform(feat, phi)
        else:
            phi = WarpParams.identity(feat.F.dtype)
            hat = feat
        pooled = hat.F.mean(dim=(2, 3)).T  # [T, C]
        if use_temporal:
            w_v = self.rearrange.value.weight
            return PreparedVideo(
                hat=hat, phi=phi, pooled=pooled,
                keyed=self.rearrange.key(pooled),
                queried=self.rearrange.query(pooled),
                valued=self.rearrange.value(pooled),
                value_maps=torch.einsum("dc,cthw->dthw", w_v, hat.F),
            )
        return PreparedVideo(hat=hat, phi=phi, pooled=pooled, keyed=None,
                             queried=None, valued=None, value_maps=None)

    def align_prepared(
        self,
        prep_s: PreparedVideo,
        prep_q: PreparedVideo,
        *,
        use_temporal: bool = True,
        use_spatial: bool = True,
        perturb_std: float = 0.0,
        force_identity_evolution: bool = False,
        generator: torch.Generator | None = None,
    ) -> AlignedPair:
        """Pair-level alignment of two prepared videos."""
        t = prep_s.pooled.shape[0]
        dtype = prep_s.pooled.dtype
        device = prep_s.pooled.device

        if use_temporal:
            if force_identity_evolution:
                evo = torch.eye(t, dtype=dtype, device=device)
            else:
                evo = torch.softmax(
                    self.rearrange.evolution_logits(prep_s.keyed, prep_q.queried), dim=1)
            tilde_s = prep_s.valued.T  # [C, T]
            tilde_q = (evo @ prep_q.valued).T
        else:
            evo = torch.eye(t, dtype=dtype, device=device)
            tilde_s, tilde_q = prep_s.pooled.T, prep_q.pooled.T

        if use_spatial:
            offsets = self.offset_head(tilde_s, tilde_q)
            if use_temporal:
                maps_s = prep_s.value_maps
                maps_q = torch.einsum("ts,dshw->dthw", evo, prep_q.value_maps)
            else:
                maps_s, maps_q = prep_s.hat.F, prep_q.hat.F
            bar_s = spatial_pool(maps_s, offsets, sign=+1, perturb_std=perturb_std,
                                 generator=generator)
            bar_q = spatial_pool(maps_q, offsets, sign=-1, perturb_std=perturb_std,
                                 generator=generator)
        else:
            offsets = torch.zeros(t, 2, dtype=dtype, device=device)
            bar_s, bar_q = tilde_s, tilde_q

        return AlignedPair(support=bar_s, query=bar_q,
                           diagnostics=AlignDiagnostics(phi_s=prep_s.phi, phi_q=prep_q.phi,
                                                        evolution=evo, offsets=offsets))

    def align_pairs_batch(
        self,
        preps_s: list[PreparedVideo],
        preps_q: list[PreparedVideo],
        *,
        use_temporal: bool = True,
        use_spatial: bool = True,
        perturb_std: float = 0.0,
        generator: torch.Generator | None = None,
    ):
        """Align every (query, support) pairing in one batched pass.

        Returns (bar_s [Qn, S, C, T], bar_q [Qn, S, C, T],
        evolution [Qn, S, T, T], offsets [Qn, S, T, 2]). Matches
        `align_prepared` pair by pair (up to perturbation draws).
        """
        ns, nq = len(preps_s), len(preps_q)
        t = preps_s[0].pooled.shape[0]
        device = preps_s[0].pooled.device
        dtype = preps_s[0].pooled.dtype

        if use_temporal:
            keyed_s = torch.stack([p.keyed for p in preps_s])  # [S, T, C]
            queried_q = torch.stack([p.queried for p in preps_q])  # [Qn, T, C]
            valued_s = torch.stack([p.valued for p in preps_s])
            valued_q = torch.stack([p.valued for p in preps_q])
            logits = torch.einsum("sic,qjc->qsij", keyed_s, queried_q) / math.sqrt(self.channels)
            eye = torch.eye(t, dtype=dtype, device=device)
            evo = torch.softmax(logits + self.rearrange.diag_bias * eye, dim=-1)  # [Qn, S, T, T]
            tilde_s = valued_s.transpose(1, 2)[None].expand(nq, ns, -1, -1)  # [Qn,S,C,T]
            tilde_q = torch.einsum("qsij,qjc->qsci", evo, valued_q)
        else:
            pooled_s = torch.stack([p.pooled for p in preps_s])
            pooled_q = torch.stack([p.pooled for p in preps_q])
            evo = torch.eye(t, dtype=dtype, device=device).expand(nq, ns, t, t)
            tilde_s = pooled_s.transpose(1, 2)[None].expand(nq, ns, -1, -1)
            tilde_q = pooled_q.transpose(1, 2)[:, None].expand(nq, ns, -1, -1)

        if not use_spatial:
            offsets = torch.zeros(nq, ns, t, 2, dtype=dtype, device=device)
            return tilde_s, tilde_q, evo, offsets

        flat = torch.cat([tilde_s, tilde_q], dim=2)  # [Qn, S, 2C, T]
        x = flat.permute(0, 1, 3, 2).reshape(nq * ns * t, -1)
        offsets = torch.tanh(self.offset_head.fc2(F.elu(self.offset_head.fc1(x))))
        offsets = offsets.reshape(nq, ns, t, 2)

        if use_temporal:
            vmaps_s = torch.stack([p.value_maps for p in preps_s])  # [S, C, T, h, w]
            vmaps_q = torch.stack([p.value_maps for p in preps_q])
            maps_q = torch.einsum("qsij,qcjhw->qscihw", evo, vmaps_q)
        else:
            vmaps_s = torch.stack([p.hat.F for p in preps_s])
            maps_q = torch.stack([p.hat.F for p in preps_q])[:, None].expand(
                nq, ns, *preps_q[0].hat.F.shape)
        maps_s = vmaps_s[None].expand(nq, *vmaps_s.shape)

        shape = maps_q.shape[2:]
        flat_offsets = offsets.reshape(nq * ns, t, 2)
        bar_s = spatial_pool_batch(maps_s.reshape(nq * ns, *shape), flat_offsets,
                                   sign=+1, perturb_std=perturb_std, generator=generator)
        bar_q = spatial_pool_batch(maps_q.reshape(nq * ns, *shape), flat_offsets,
                                   sign=-1, perturb_std=perturb_std, generator=generator)
        return (bar_s.reshape(nq, ns, *bar_s.shape[1:]),
                bar_q.reshape(nq, ns, *bar_q.shape[1:]), evo, offsets)

    def align(
        self,
        feat_s: VideoFeature,
        feat_q: VideoFeature,
        *,
        use_temporal: bool = True,
        use_spatial: bool = True,
        perturb_std: float = 0.0,
        force_identity_evolution: bool = False,
        order: str = "temporal_first",
        generator: torch.Generator | None = None,
    ) -> AlignedPair:
        """Align a query video feature to a support video feature.

        Returns pooled [C, T] features for both sides plus diagnostics.
        Either stage can be disabled; `order="spatial_first"` runs the
        spatial stage on unwarped features (a deliberately worse variant
        kept for diagnostics).
        """
        if order not in ("temporal_first", "spatial_first"):
            raise ValueError(f"unknown order {order!r}")
        if order == "spatial_first" and use_spatial:
            return self._spatial_first(feat_s, feat_q, use_temporal, perturb_std,
                                       force_identity_evolution, generator)
        prep_s = self.prepare(feat_s, use_temporal)
        prep_q = self.prepare(feat_q, use_temporal)
        return self.align_prepared(prep_s, prep_q, use_temporal=use_temporal,
                                   use_spatial=use_spatial, perturb_std=perturb_std,
                                   force_identity_evolution=force_identity_evolution,
                                   generator=generator)

    def _spatial_first(self, feat_s, feat_q, use_temporal, perturb_std,
                       force_identity_evolution, generator):
        """Diagnostic variant: offset pooling before any temporal alignment."""
        t = feat_s.F.shape[1]
        dtype = feat_s.F.dtype
        pooled_s = feat_s.F.mean(dim=(2, 3))
        pooled_q = feat_q.F.mean(dim=(2, 3))
        offsets = self.offset_head(pooled_s, pooled_q)
        flat_s = spatial_pool(feat_s.F, offsets, +1, perturb_std, generator=generator)
        flat_q = spatial_pool(feat_q.F, offsets, -1, perturb_std, generator=generator)
        if use_temporal:
            prep_s = self.prepare(VideoFeature(F=flat_s[:, :, None, None]), True)
            prep_q = self.prepare(VideoFeature(F=flat_q[:, :, None, None]), True)
            pair = self.align_prepared(prep_s, prep_q, use_temporal=True,
                                       use_spatial=False,
                                       force_identity_evolution=force_identity_evolution)
            return AlignedPair(support=pair.support, query=pair.query,
                               diagnostics=AlignDiagnostics(
                                   phi_s=pair.diagnostics.phi_s,
                                   phi_q=pair.diagnostics.phi_q,
                                   evolution=pair.diagnostics.evolution,
                                   offsets=offsets))
        phi = WarpParams.identity(dtype)
        evo = torch.eye(t, dtype=dtype)
        return AlignedPair(support=flat_s, query=flat_q,
                           diagnostics=AlignDiagnostics(phi_s=phi, phi_q=phi,
                                                        evolution=evo, offsets=offsets))


def alignment_cost(diag: AlignDiagnostics) -> torch.Tensor:
    """Scalar deviation of the alignment from the identity.

    Sum of the temporal warp cost (|1-a| + |b|, averaged over the two
    videos), the Frobenius distance of the evolution matrix from identity,
    and the Frobenius norm of the offsets.
    """
    warp_cost = 0.5 * ((1 - diag.phi_s.a).abs() + diag.phi_s.b.abs()
                       + (1 - diag.phi_q.a).abs() + diag.phi_q.b.abs())
    t = diag.evolution.shape[0]
    eye = torch.eye(t, dtype=diag.evolution.dtype, device=diag.evolution.device)
    return warp_cost + (diag.evolution - eye).norm() + diag.offsets.norm()


def alignment_cost_batch(phi_s: torch.Tensor, phi_q: torch.Tensor, evo: torch.Tensor,
                         offsets: torch.Tensor) -> torch.Tensor:
    """Pairwise alignment costs [Qn, S] from stacked diagnostics.

    phi_s: [S, 2] support (a, b); phi_q: [Qn, 2]; evo: [Qn, S, T, T];
    offsets: [Qn, S, T, 2]. Same formula as `alignment_cost`, per pair.
    """
    warp_s = (1 - phi_s[:, 0]).abs() + phi_s[:, 1].abs()  # [S]
    warp_q = (1 - phi_q[:, 0]).abs() + phi_q[:, 1].abs()  # [Qn]
    warp = 0.5 * (warp_s[None, :] + warp_q[:, None])
    t = evo.shape[-1]
    eye = torch.eye(t, dtype=evo.dtype, device=evo.device)
    evo_term = (evo - eye).norm(dim=(-2, -1))
    off_term = offsets.norm(dim=(-2, -1))
    return warp + evo_term + off_term

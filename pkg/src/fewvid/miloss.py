"""Mutual-information auxiliary losses for the sampler and the alignment.

Two trainable estimators provide the MI terms:

* label/feature MI uses the classifier bound I(Y; F) = H(Y) - H(Y|F), with
  H(Y|F) the cross-entropy of a small linear head and H(Y) the empirical
  label entropy. It can never exceed H(Y) and is clamped at zero.
* feature/feature MI uses an in-batch contrastive (InfoNCE) bound with a
  bilinear critic: log B minus the contrastive loss, which lives in
  [0, log B].

The estimator heads are trained on detached features (their own optimizer
steps in the trainer); the loss terms built here pass gradients through the
estimates into the sampler and alignment features.

The sampler term penalizes any gap in class information between the
selected frames and the dense clip; the dense side is treated as a fixed
reference (gradient blocked) so the pressure lands on the selection. The
alignment term rewards class information in the aligned query feature that
is not already present in the raw query feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class MIEstimate:
    value: torch.Tensor  # scalar, clamped >= 0
    flag: str | None = None


def _clamp_nonnegative(raw: torch.Tensor) -> torch.Tensor:
    """Clamp the estimate at zero with a straight-through gradient.

    The reported value is max(raw, 0), but the raw bound's gradient is kept
    so a pessimistic (early-training) estimator still steers the features
    instead of going silent below the clamp.
    """
    return raw + (raw.clamp(min=0) - raw).detach()


@dataclass
class LossBundle:
    cls: torch.Tensor
    intra: torch.Tensor
    inter: torch.Tensor
    mu1: float
    mu2: float
    total: torch.Tensor


def label_entropy(labels: torch.Tensor) -> torch.Tensor:
    """Empirical entropy (nats) of an integer label batch."""
    _, counts = labels.unique(return_counts=True)
    p = counts.double() / labels.shape[0]
    return -(p * p.log()).sum()


class LabelFeatureMI(nn.Module):
    """Classifier-bound estimator of I(Y; F) for discrete labels."""

    def __init__(self, feature_dim: int, num_classes: int):
        super().__init__()
        self.head = nn.Linear(feature_dim, num_classes)

    def head_loss(self, features: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Cross-entropy objective for training the head (features detached)."""
        return F.cross_entropy(self.head(features.detach()), labels)

    def estimate(self, features: torch.Tensor, labels: torch.Tensor) -> MIEstimate:
        """I(Y; F) >= H(Y) - CE(head(F), Y), clamped to [0, H(Y)].

        features: [B, D]; labels: [B] ints. A single-class batch carries no
        label information and returns 0 with a flag.
        """
        if features.shape[0] < 2:
            raise ValueError("need a batch of at least 2")
        if labels.unique().numel() < 2:
            return MIEstimate(value=features.new_zeros(()), flag="single_class_batch")
        h_y = label_entropy(labels).to(features.dtype)
        h_y_given_f = F.cross_entropy(self.head(features), labels)
        return MIEstimate(value=_clamp_nonnegative(h_y - h_y_given_f))


class FeatureFeatureMI(nn.Module):
    """Contrastive (InfoNCE) estimator of I(A; B) with a bilinear critic."""

    def __init__(self, dim_a: int, dim_b: int):
        super().__init__()
        self.critic = nn.Bilinear(dim_a, dim_b, 1, bias=False)

    def scores(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """[B, B] critic scores for every (a_i, b_j) pair."""
        n = a.shape[0]
        ai = a[:, None].expand(n, n, a.shape[1]).reshape(n * n, -1)
        bj = b[None, :].expand(n, n, b.shape[1]).reshape(n * n, -1)
        return self.critic(ai, bj).reshape(n, n)

    def head_loss(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Contrastive objective for training the critic (inputs detached)."""
        s = self.scores(a.detach(), b.detach())
        labels = torch.arange(s.shape[0], device=s.device)
        return F.cross_entropy(s, labels)

    def estimate(self, a: torch.Tensor, b: torch.Tensor) -> MIEstimate:
        """I(A; B) >= log B - InfoNCE loss, clamped to [0, log B]."""
        if a.shape[0] < 2:
            raise ValueError("need a batch of at least 2")
        s = self.scores(a, b)
        n = s.shape[0]
        nce = (torch.diagonal(s) - torch.logsumexp(s, dim=1)).mean()
        raw = torch.log(torch.tensor(float(n), dtype=s.dtype)) + nce
        return MIEstimate(value=_clamp_nonnegative(raw))


def intra_loss(estimator: LabelFeatureMI, sampled_feats: torch.Tensor,
               dense_feats: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """| I(Y; sampled) - I(Y; dense) |, dense side gradient-blocked."""
    mi_sampled = estimator.estimate(sampled_feats, labels).value
    mi_dense = estimator.estimate(dense_feats.detach(), labels).value
    return (mi_sampled - mi_dense).abs()


def inter_loss(label_estimator: LabelFeatureMI, feature_estimator: FeatureFeatureMI,
               aligned_q: torch.Tensor, raw_q: torch.Tensor,
               labels: torch.Tensor) -> torch.Tensor:
    """-( I(Y; aligned) - I(aligned; raw) ): reward new class information."""
    mi_label = label_estimator.estimate(aligned_q, labels).value
    mi_redundant = feature_estimator.estimate(aligned_q, raw_q).value
    return -(mi_label - mi_redundant)


def total_loss(l_cls: torch.Tensor, l_intra: torch.Tensor, l_inter: torch.Tensor,
               mu1: float = 0.5, mu2: float = 1.0) -> LossBundle:
    """Weighted sum of the loss terms; exact linear combination."""
    for name, val in (("cls", l_cls), ("intra", l_intra), ("inter", l_inter)):
        if not torch.isfinite(val):
            raise ValueError(f"non-finite {name} loss")
    return LossBundle(cls=l_cls, intra=l_intra, inter=l_inter, mu1=mu1, mu2=mu2,
                      total=l_cls + mu1 * l_intra + mu2 * l_inter)

"""Prototype construction and frame-wise cosine classification."""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-8


@dataclass
class Prototype:
    P: torch.Tensor  # [C', T]
    class_id: int  # episode-local label


@dataclass
class EpisodePrediction:
    probs: torch.Tensor  # [N], sums to 1
    predicted: int


def frame_cosine_distance(f: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Sum over timesteps of (1 - cosine similarity): [C', T] x [C', T] -> scalar.

    Range [0, 2T]; zero-norm timesteps are guarded with a small epsilon.
    """
    num = (f * p).sum(dim=0)
    denom = f.norm(dim=0) * p.norm(dim=0) + EPS
    return (1 - num / denom).sum()


def build_prototypes(aligned_support: dict[int, list[torch.Tensor]]) -> list[Prototype]:
    """Element-wise mean of each class's aligned support features."""
    protos = []
    for class_id in sorted(aligned_support):
        feats = aligned_support[class_id]
        if not feats:
            raise ValueError(f"class {class_id} has no support features")
        protos.append(Prototype(P=torch.stack(feats).mean(dim=0), class_id=class_id))
    return protos


def classify(query_feature: torch.Tensor, prototypes: list[Prototype]) -> EpisodePrediction:
    """Softmax over negative frame-wise cosine distances to each prototype."""
    if len(prototypes) < 2:
        raise ValueError("need at least two prototypes")
    d = torch.stack([frame_cosine_distance(query_feature, p.P) for p in prototypes])
    probs = torch.softmax(-d, dim=0)
    return EpisodePrediction(probs=probs, predicted=int(probs.argmax()))


def cls_loss(predictions: list[EpisodePrediction], labels: list[int]) -> torch.Tensor:
    """Mean negative log-probability of the true class over the query set."""
    if len(predictions) != len(labels):
        raise ValueError("predictions/labels length mismatch")
    nll = [-torch.log(pred.probs[label] + EPS) for pred, label in zip(predictions, labels)]
    return torch.stack(nll).mean()

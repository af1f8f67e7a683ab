"""Per-sample class prototypes and the prototypical probability predictions.

A prototype is the probability-weighted average of a sample's pixel features
for one class. Matching a feature map against its own prototypes gives the
self-aware prediction; matching it against every other batch sample's
prototypes and pooling the exponentiated similarities gives the cross-sample
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .core import class_softmax

EPS = 1e-8
DEGENERATE_MASS = 1e-6


@dataclass
class PrototypeSet:
    """One prototype vector per class, aggregated within a single sample."""

    vectors: Tensor  # (C, D)
    source_sample: int = 0
    degenerate_classes: tuple[int, ...] = ()


@dataclass
class SimilarityStack:
    """Cosine maps of one sample's features against every batch sample's prototypes.

    maps[n] is the similarity of the target's feature map against sample n's
    prototypes; maps[target_sample] is the self-aware map.
    """

    maps: Tensor  # (B, C, H, W)
    target_sample: int

    @property
    def batch_size(self) -> int:
        return self.maps.shape[0]

    @property
    def self_map(self) -> Tensor:
        return self.maps[self.target_sample]


def compute_prototypes(prob: Tensor, feat: Tensor, source_sample: int = 0) -> PrototypeSet:
    """Aggregate per-class prototypes q^c = sum_i p^c(i) f(i) / (sum_i p^c(i) + eps).

    prob: (C, H, W) per-pixel class distribution; feat: (D, H, W) embedding.
    Classes whose total probability mass falls below DEGENERATE_MASS keep a
    zero prototype and are listed in degenerate_classes.
    """
    if prob.shape[-2:] != feat.shape[-2:]:
        raise ValueError(
            f"spatial shape mismatch: prob {tuple(prob.shape)} vs feat {tuple(feat.shape)}"
        )
    mass = prob.sum(dim=(-2, -1))  # (C,)
    weighted = torch.einsum("chw,dhw->cd", prob, feat)
    vectors = weighted / (mass[:, None] + EPS)
    degenerate = tuple(int(c) for c in torch.nonzero(mass < DEGENERATE_MASS).flatten().tolist())
    return PrototypeSet(vectors=vectors, source_sample=source_sample, degenerate_classes=degenerate)


def cosine_similarity_map(feat: Tensor, protos: PrototypeSet) -> Tensor:
    """Cosine similarity of every pixel feature against every class prototype.

    Returns (C, H, W) values clamped to [-1, 1]; a zero (degenerate) prototype
    yields an all-zero map through the eps-guarded denominator.
    """
    vectors = protos.vectors
    if feat.shape[0] != vectors.shape[1]:
        raise ValueError(
            f"embed dim mismatch: feat has D={feat.shape[0]}, prototypes have D={vectors.shape[1]}"
        )
    dots = torch.einsum("dhw,cd->chw", feat, vectors)
    denom = feat.norm(dim=0)[None] * vectors.norm(dim=1)[:, None, None] + EPS
    return (dots / denom).clamp(-1.0, 1.0)


def self_aware_prediction(sim_self: Tensor) -> Tensor:
    """Softmax the self-aware similarity map into a per-pixel class distribution."""
    if float(sim_self.abs().max()) > 1.0 + 1e-6:
        raise ValueError("similarity values must lie in [-1, 1]")
    return class_softmax(sim_self)


def cross_sample_prediction(stack: SimilarityStack) -> Tensor:
    """Pool the exponentiated cross-sample similarities into one prediction.

    p^c(i) = sum_{j != k} exp(s_j^c(i)) / sum_c sum_{j != k} exp(s_j^c(i)),
    where k is the stack's target sample; the self map never enters the sums.
    """
    b = stack.batch_size
    if b < 2:
        raise ValueError("cross-sample prediction needs a batch of >= 2 samples")
    k = stack.target_sample
    others = torch.cat([stack.maps[:k], stack.maps[k + 1 :]])
    pooled = others.exp().sum(dim=0)  # (C, H, W); strictly positive
    return pooled / pooled.sum(dim=0, keepdim=True)


def batch_prototypes(probs: Tensor, feats: Tensor) -> list[PrototypeSet]:
    """Prototypes for every sample of a batch; the collection holds B x C vectors."""
    return [compute_prototypes(probs[k], feats[k], source_sample=k) for k in range(probs.shape[0])]


def similarity_stack(feats: Tensor, protos: list[PrototypeSet], target: int) -> SimilarityStack:
    """Similarity maps of sample `target` against every sample's prototypes."""
    maps = torch.stack([cosine_similarity_map(feats[target], p) for p in protos])
    return SimilarityStack(maps=maps, target_sample=target)

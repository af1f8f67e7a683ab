"""Vote-based prediction uncertainty and the two consistency re-weighting maps.

Each of the B similarity maps in a stack casts one argmax vote per pixel.
The normalized entropy of the vote histogram measures how much the
prototypical predictions disagree; pixels with unstable votes (w1 = 1 - e)
or low self-aware confidence (w2 = max class probability) are down-weighted
in the cross-sample consistency loss.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

from .core import CLASS_AXIS, argmax_one_hot
from .prototypes import SimilarityStack


def vote_probability(stack: SimilarityStack) -> Tensor:
    """Per-pixel class-vote histogram over all B argmax masks, self map included.

    Entries are exact multiples of 1/B and sum to 1 per pixel.
    """
    if stack.batch_size < 2:
        raise ValueError("vote probability needs a stack of >= 2 similarity maps")
    masks = argmax_one_hot(stack.maps)  # (B, C, H, W)
    return masks.sum(dim=0) / stack.batch_size


def normalized_entropy(p_norm: Tensor) -> Tensor:
    """Entropy of the per-pixel vote distribution, scaled to [0, 1] by log C.

    Uses the 0 * log 0 = 0 convention; 0 at unanimity, 1 at uniform votes.
    """
    c = p_norm.shape[CLASS_AXIS]
    if c < 2:
        raise ValueError("normalized entropy needs >= 2 classes (log C would vanish)")
    plogp = torch.special.xlogy(p_norm, p_norm)
    return (-plogp.sum(dim=CLASS_AXIS) / math.log(c)).clamp(0.0, 1.0)


def stability_weight(entropy: Tensor) -> Tensor:
    """w1 = 1 - e: full weight where the vote is unanimous, zero where it is uniform."""
    return 1.0 - entropy


def confidence_weight(p_self: Tensor) -> Tensor:
    """w2 = per-pixel maximum of the self-aware prediction; bounded in [1/C, 1]."""
    return p_self.amax(dim=CLASS_AXIS)

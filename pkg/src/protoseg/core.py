"""Shared domain types and elementary class-axis tensor helpers.

Dense maps follow a fixed layout: class maps are (C, H, W), feature maps are
(D, H, W), and batched variants prepend a batch axis. The class axis is
therefore always axis -3, which lets the helpers below work on single samples
and batches alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

CLASS_AXIS = -3


@dataclass
class LabeledSample:
    """A 2D slice with its one-hot mask."""

    image: np.ndarray  # (H, W) float32 in [0, 1]
    label: np.ndarray  # (C, H, W) one-hot
    case_id: str
    slice_index: int


@dataclass
class UnlabeledSample:
    """A 2D slice without annotation."""

    image: np.ndarray  # (H, W) float32 in [0, 1]
    case_id: str
    slice_index: int


@dataclass
class BatchConfig:
    """Batch composition: every batch holds labeled_per_batch + unlabeled_per_batch slices."""

    labeled_per_batch: int = 12
    unlabeled_per_batch: int = 12
    class_count: int = 4
    embed_dim: int = 16

    @property
    def batch_size(self) -> int:
        return self.labeled_per_batch + self.unlabeled_per_batch

    def __post_init__(self) -> None:
        if self.labeled_per_batch < 0 or self.unlabeled_per_batch < 0:
            raise ValueError("per-batch counts must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2: cross-sample terms need at least one other sample")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")


def _first_nonfinite_index(values: Tensor) -> tuple:
    return tuple(int(i) for i in (~torch.isfinite(values)).nonzero()[0])


def class_softmax(scores: Tensor) -> Tensor:
    """Per-pixel softmax over the class axis.

    Computed with per-pixel max subtraction for stability; the result is
    unchanged by any per-pixel additive shift of the scores.
    """
    if not torch.isfinite(scores).all():
        raise ValueError(f"non-finite score at index {_first_nonfinite_index(scores)}")
    shifted = scores - scores.amax(dim=CLASS_AXIS, keepdim=True)
    exp = shifted.exp()
    return exp / exp.sum(dim=CLASS_AXIS, keepdim=True)


def argmax_one_hot(values: Tensor) -> Tensor:
    """One-hot mask of the per-pixel argmax over classes; ties go to the lowest class index."""
    if not torch.isfinite(values).all():
        raise ValueError(f"non-finite value at index {_first_nonfinite_index(values)}")
    c = values.shape[CLASS_AXIS]
    view = [1] * values.dim()
    view[CLASS_AXIS] = c
    class_index = torch.arange(c, device=values.device).view(view)
    peak = values.amax(dim=CLASS_AXIS, keepdim=True)
    # lowest index among the maxima, computed explicitly so ties are reproducible
    winner = torch.where(values == peak, class_index, c).amin(dim=CLASS_AXIS, keepdim=True)
    return (class_index == winner).to(values.dtype)


def probability_deviation(values: Tensor) -> float:
    """Largest per-pixel deviation of the class sums from 1."""
    with torch.no_grad():
        return float((values.sum(dim=CLASS_AXIS) - 1.0).abs().max())


def validate_probability_map(values: Tensor, tol: float = 1e-5) -> None:
    """Reject tensors that are not per-pixel class distributions within tol."""
    if values.shape[CLASS_AXIS] < 2:
        raise ValueError(f"probability map needs >= 2 classes, got {values.shape[CLASS_AXIS]}")
    if not torch.isfinite(values).all():
        raise ValueError(f"non-finite probability at index {_first_nonfinite_index(values)}")
    lo, hi = float(values.min()), float(values.max())
    if lo < -tol or hi > 1.0 + tol:
        raise ValueError(f"probabilities outside [0, 1]: min={lo:.3g} max={hi:.3g}")
    dev = probability_deviation(values)
    if dev > tol:
        raise ValueError(f"per-pixel class sums deviate from 1 by {dev:.3g} (tol {tol:g})")


def validate_one_hot(label: Tensor) -> None:
    """Reject masks that are not exactly one-hot over the class axis."""
    if not ((label == 0) | (label == 1)).all():
        raise ValueError("one-hot mask entries must be 0 or 1")
    sums = label.sum(dim=CLASS_AXIS)
    if not (sums == 1).all():
        raise ValueError("one-hot mask must have exactly one active class per pixel")

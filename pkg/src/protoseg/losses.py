"""Training losses: the two prototypical consistency terms, the supervised
cross-entropy + Dice term, and their warmup-weighted combination.

Consistency targets (prototypical predictions) and re-weighting maps are
always treated as constants: they are detached before entering a loss, so no
gradient can flow into them and the model cannot cheat by degrading its own
targets.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import Tensor

from .core import validate_one_hot

CE_CLAMP = 1e-7
DICE_EPS = 1e-5
LAMBDA_MAX = 0.1


@dataclass
class LossToggles:
    """Independent switches for the ablation matrix."""

    spcc: bool = True
    cpcc: bool = True
    w1: bool = True
    w2: bool = True


@dataclass
class LossReport:
    """Per-iteration loss components; total = seg + lambda_t * (spcc + cpcc)."""

    iteration: int
    seg: float
    spcc: float
    cpcc: float
    lambda_t: float
    total: float


def _gap(target: Tensor, pred: Tensor, squared: bool) -> Tensor:
    diff = target.detach() - pred
    return diff.pow(2) if squared else diff.abs()


def spcc_loss(p_self: Tensor, p_net: Tensor, squared: bool = True) -> Tensor:
    """Self-aware consistency: mean squared gap between the (detached)
    self-aware prototypical prediction and the network prediction.

    squared=False switches to the mean absolute gap.
    """
    if p_self.shape != p_net.shape:
        raise ValueError(f"shape mismatch: target {tuple(p_self.shape)} vs prediction {tuple(p_net.shape)}")
    return _gap(p_self, p_net, squared).mean()


def cpcc_loss(
    p_cross: Tensor,
    p_net: Tensor,
    w1: Tensor | None = None,
    w2: Tensor | None = None,
    squared: bool = True,
) -> Tensor:
    """Cross-sample consistency re-weighted per pixel by w1 * w2.

    w1 (vote stability) and w2 (self-aware confidence) are (H, W) maps; either
    may be None, which drops that factor (the ablation's "w/o" setting). Both
    are detached: they re-weight the constraint but receive no gradient.
    """
    if p_cross.shape != p_net.shape:
        raise ValueError(f"shape mismatch: target {tuple(p_cross.shape)} vs prediction {tuple(p_net.shape)}")
    gap = _gap(p_cross, p_net, squared)
    if w1 is not None:
        gap = gap * w1.detach()
    if w2 is not None:
        gap = gap * w2.detach()
    return gap.mean()


def supervised_loss(p_net: Tensor, label: Tensor) -> Tensor:
    """Cross-entropy plus soft Dice against a one-hot mask.

    CE averages over pixels; Dice averages over all classes, background
    included, with eps smoothing so empty classes contribute no penalty.
    """
    if p_net.shape != label.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(p_net.shape)} vs label {tuple(label.shape)}")
    validate_one_hot(label)
    ce = -(label * p_net.clamp(min=CE_CLAMP, max=1.0).log()).sum(dim=0).mean()
    intersection = (p_net * label).sum(dim=(-2, -1))
    totals = p_net.sum(dim=(-2, -1)) + label.sum(dim=(-2, -1))
    dice = 1.0 - ((2.0 * intersection + DICE_EPS) / (totals + DICE_EPS)).mean()
    return ce + dice


def warmup_lambda(t: int, t_max: int) -> float:
    """Time-dependent Gaussian warmup 0.1 * exp(-5 (1 - t/t_max)^2).

    Monotone nondecreasing on [0, t_max]; iterations past t_max clamp to 0.1
    with a warning.
    """
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    if t < 0:
        raise ValueError("iteration must be nonnegative")
    if t > t_max:
        warnings.warn(f"iteration {t} is past t_max={t_max}; warmup weight clamped to {LAMBDA_MAX}")
        return LAMBDA_MAX
    return LAMBDA_MAX * math.exp(-5.0 * (1.0 - t / t_max) ** 2)


def _mean(parts: list) -> Tensor | None:
    if not parts:
        return None
    return sum(parts) / len(parts)


def total_loss(
    seg_losses: list,
    spcc_losses: list,
    cpcc_losses: list,
    t: int,
    t_max: int,
    toggles: LossToggles | None = None,
) -> tuple[Tensor, LossReport]:
    """Combine per-sample losses into the overall training objective.

    seg_losses holds one entry per labeled sample, the consistency lists one
    entry per batch sample (labeled and unlabeled alike). Each component is
    averaged over its samples before weighting, so batch size does not rescale
    the objective. Returns the differentiable total plus a float report.
    """
    toggles = toggles if toggles is not None else LossToggles()
    lam = warmup_lambda(t, t_max)
    seg = _mean(list(seg_losses))
    spcc = _mean(list(spcc_losses)) if toggles.spcc else None
    cpcc = _mean(list(cpcc_losses)) if toggles.cpcc else None
    if seg is None and spcc is None and cpcc is None:
        raise ValueError("vacuous loss: no labeled samples and every consistency term disabled")
    total = 0.0
    if seg is not None:
        total = total + seg
    if spcc is not None:
        total = total + lam * spcc
    if cpcc is not None:
        total = total + lam * cpcc

    def as_float(value) -> float:
        return float(value.detach()) if torch.is_tensor(value) else float(value)

    report = LossReport(
        iteration=t,
        seg=as_float(seg) if seg is not None else 0.0,
        spcc=as_float(spcc) if spcc is not None else 0.0,
        cpcc=as_float(cpcc) if cpcc is not None else 0.0,
        lambda_t=lam,
        total=as_float(total),
    )
    return torch.as_tensor(total) if not torch.is_tensor(total) else total, report

"""Supervised CE + Dice loss, weak-to-strong consistency loss and the consistency ramp.

All functions take logits shaped (N, C, H, W) and integer targets shaped (N, H, W).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeMismatch

DICE_EPS = 1e-6


@dataclass
class RampSchedule:
    lambda_max: float = 1.0
    ramp_epochs: int = 200

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be >= 0")
        if self.ramp_epochs < 0:
            raise ValueError("ramp_epochs must be >= 0")


def lambda_at(epoch: float, schedule: RampSchedule = RampSchedule()) -> float:
    """Gaussian ramp-up ``lambda_max * exp(-5 (1 - t)^2)``, t = min(epoch / ramp_epochs, 1)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.ramp_epochs == 0:
        return schedule.lambda_max
    t = min(epoch / schedule.ramp_epochs, 1.0)
    return schedule.lambda_max * math.exp(-5.0 * (1.0 - t) ** 2)


@dataclass
class LossBundle:
    total: float
    supervised: float
    unsupervised: float
    lam: float
    valid_pixel_fraction: float


def _check(z: torch.Tensor, y: torch.Tensor):
    if z.dim() != 4 or y.shape != (z.shape[0],) + tuple(z.shape[2:]):
        raise ShapeMismatch(f"logits {tuple(z.shape)} vs targets {tuple(y.shape)}")


def cross_entropy(z: torch.Tensor, y: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over pixels of -log softmax(z)[true class]; ``weight`` restricts to a pixel subset."""
    _check(z, y)
    nll = -F.log_softmax(z, dim=1).gather(1, y.long().unsqueeze(1)).squeeze(1)
    if weight is None:
        return nll.mean()
    w = weight.to(nll.dtype)
    return (nll * w).sum() / w.sum().clamp_min(1.0)


def one_hot(y: torch.Tensor, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    return F.one_hot(y.long(), n_classes).permute(0, 3, 1, 2).to(dtype)


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS,
              weight: torch.Tensor | None = None) -> torch.Tensor:
    """``1 - mean_c (2 sum(t p) + eps) / (sum(t^2) + sum(p^2) + eps)``.

    Both inputs are (N, C, H, W); sums run per image and class, the Dice is averaged
    over all classes and then over images. ``weight`` (N, H, W) masks pixels out;
    images without any weighted pixel are skipped.
    """
    if probs.shape != target.shape:
        raise ShapeMismatch(f"probabilities {tuple(probs.shape)} vs target {tuple(target.shape)}")
    t = target.to(probs.dtype)
    p = probs
    if weight is not None:
        w = weight.to(probs.dtype).unsqueeze(1)
        p, t = p * w, t * w
    inter = (t * p).sum(dim=(2, 3))
    denom = (t * t).sum(dim=(2, 3)) + (p * p).sum(dim=(2, 3))
    dice = (2 * inter + eps) / (denom + eps)
    per_image = 1 - dice.mean(dim=1)
    if weight is not None:
        keep = weight.flatten(1).sum(dim=1) > 0
        if not keep.any():
            return probs.sum() * 0
        return per_image[keep].mean()
    return per_image.mean()


def supervised_loss(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """CE + Dice loss of logits against integer labels."""
    _check(z, y)
    return cross_entropy(z, y) + dice_loss(F.softmax(z, dim=1), one_hot(y, z.shape[1], z.dtype))


def negative_learning(z_strong: torch.Tensor, least_likely: torch.Tensor,
                      weight: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of ``-log(1 - softmax(z_strong)[k])`` for the weak view's least likely class k.

    Evaluated as ``logsumexp(z) - logsumexp(z without k)`` for stability.
    """
    _check(z_strong, least_likely)
    k = least_likely.long().unsqueeze(1)
    masked = z_strong.scatter(1, k, float("-inf"))
    term = torch.logsumexp(z_strong, dim=1) - torch.logsumexp(masked, dim=1)
    if weight is None:
        return term.mean()
    w = weight.to(term.dtype)
    return (term * w).sum() / w.sum().clamp_min(1.0)


@dataclass
class ConsistencyTerms:
    loss: torch.Tensor
    ce: torch.Tensor
    dice: torch.Tensor
    negative: torch.Tensor
    valid_fraction: float


@torch.no_grad()
def weak_targets(z_weak: torch.Tensor, tau: float):
    """Pseudo-labels, least-likely classes and validity from the weak view (no gradient)."""
    p = F.softmax(z_weak.detach(), dim=1)
    conf, labels = p.max(dim=1)
    least = p.argmin(dim=1)
    return labels, least, conf >= tau


def consistency_terms(z_weak: torch.Tensor, z_strong: torch.Tensor, tau: float = 0.8,
                      weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> ConsistencyTerms:
    """Gated weak-to-strong consistency: CE + Dice to the weak pseudo-labels plus negative learning.

    Only pixels whose weak max-softmax reaches ``tau`` participate. With no such pixel the
    loss is a constant zero (no gradient path).
    """
    if z_weak.shape != z_strong.shape:
        raise ShapeMismatch(f"weak {tuple(z_weak.shape)} vs strong {tuple(z_strong.shape)}")
    labels, least, valid = weak_targets(z_weak, tau)
    frac = float(valid.float().mean())
    if not valid.any():
        zero = torch.zeros((), dtype=z_strong.dtype, device=z_strong.device)
        return ConsistencyTerms(zero, zero, zero, zero, 0.0)
    ce = cross_entropy(z_strong, labels, weight=valid)
    dice = dice_loss(F.softmax(z_strong, dim=1), one_hot(labels, z_strong.shape[1], z_strong.dtype), weight=valid)
    neg = negative_learning(z_strong, least, weight=valid)
    w_ce, w_dice, w_neg = weights
    return ConsistencyTerms(w_ce * ce + w_dice * dice + w_neg * neg, ce, dice, neg, frac)


def consistency_loss(z_weak: torch.Tensor, z_strong: torch.Tensor, tau: float = 0.8,
                     weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> torch.Tensor:
    return consistency_terms(z_weak, z_strong, tau, weights).loss


def validation_dice_loss(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return dice_loss(F.softmax(z, dim=1), one_hot(y, z.shape[1], z.dtype))

"""Training losses: supervised CE + Dice, cross pseudo supervision, interpolation
consistency, and the mutual-agreement loss (pixel KL + MIG).

All losses take probability maps (post-softmax) unless noted otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .core import Ablation, LossWeights, ValidationError, expand_one_hot, one_hot_encode

PROB_EPS = 1e-8
DICE_SMOOTH = 1e-5


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_target(probs, target):
    if probs.dim() != 4 or target.dim() != 3:
        raise ValidationError(
            f"expected (B, C, H, W) probabilities and (B, H, W) target, got "
            f"{tuple(probs.shape)} and {tuple(target.shape)}")
    if probs.shape[:1] + probs.shape[2:] != target.shape:
        raise ValidationError(f"shape mismatch: probabilities {tuple(probs.shape)} vs target {tuple(target.shape)}")


def ce_loss(probs, target):
    """Mean per-pixel negative log-likelihood of the target class."""
    _check_target(probs, target)
    p = probs.gather(1, target.long().unsqueeze(1)).clamp_min(PROB_EPS)
    return -p.log().mean()


def soft_dice(probs, target, smooth=DICE_SMOOTH):
    """Per-class soft Dice coefficient, pooled over batch and pixels."""
    _check_target(probs, target)
    onehot = expand_one_hot(target, probs.shape[1], dtype=probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return (2 * inter + smooth) / (denom + smooth)


def dice_loss(probs, target, smooth=DICE_SMOOTH):
    return 1.0 - soft_dice(probs, target, smooth).mean()


def supervised_loss(probs, target):
    return ce_loss(probs, target) + dice_loss(probs, target)


def cross_supervision_losses(p1, p2):
    """(semi1, semi2): each model fitted to the other's hard pseudo-labels.

    The pseudo-labels are integer argmax masks, so neither term sends gradient
    to the model that produced its labels.
    """
    _same_shape(p1, p2, "cross supervision")
    y1 = one_hot_encode(p1)
    y2 = one_hot_encode(p2)
    return supervised_loss(p1, y2), supervised_loss(p2, y1)


def mixup(x_i, x_j, sigma=0.5):
    _same_shape(x_i, x_j, "mixup")
    if not 0.0 <= sigma <= 1.0:
        raise ValidationError(f"mix ratio must lie in [0, 1], got {sigma}")
    return sigma * x_i + (1.0 - sigma) * x_j


def interpolation_consistency_loss(student_mixed, teacher_i, teacher_j, sigma=0.5):
    """Mean squared gap between the student on mixed inputs and the mixed teacher outputs."""
    target = mixup(teacher_i.detach(), teacher_j.detach(), sigma)
    _same_shape(student_mixed, target, "interpolation consistency")
    return ((student_mixed - target) ** 2).mean()


def kl_pixel_loss(p1, p2):
    """Mean over pixels of KL(p1 || p2), probabilities clamped at 1e-8."""
    _same_shape(p1, p2, "pixel KL")
    a = p1.clamp_min(PROB_EPS)
    b = p2.clamp_min(PROB_EPS)
    return (a * (a.log() - b.log())).sum(dim=1).mean()


def inter_class_similarity(probs):
    """Mean cosine similarity between class-probability planes, over unordered class pairs.

    Cosines are taken per image and averaged over the batch.
    """
    B, C = probs.shape[:2]
    if C < 2:
        raise ValidationError("inter-class similarity needs at least two classes")
    planes = probs.reshape(B, C, -1)
    norms = planes.norm(dim=2).clamp_min(PROB_EPS)
    gram = planes @ planes.transpose(1, 2) / (norms.unsqueeze(2) * norms.unsqueeze(1))
    iu = torch.triu_indices(C, C, offset=1)
    return gram[:, iu[0], iu[1]].mean()


def intra_pixel_confidence(probs):
    return probs.max(dim=1).values.mean()


def mig_loss(p1, p2):
    """Inter-class similarity minus intra-pixel confidence, averaged over both
    models and shifted by +1 into [0, 2]."""
    _same_shape(p1, p2, "MIG")
    if p1.shape[1] < 2:
        raise ValidationError("MIG needs at least two classes")
    g1 = inter_class_similarity(p1) - intra_pixel_confidence(p1)
    g2 = inter_class_similarity(p2) - intra_pixel_confidence(p2)
    return (g1 + g2) / 2 + 1.0


def mac_loss(p1, p2):
    """Mutual-agreement loss; gradient reaches both inputs."""
    return kl_pixel_loss(p1, p2) + mig_loss(p1, p2)


@dataclass
class LossBundle:
    sup1: object = 0.0
    sup2: object = 0.0
    semi1: object = 0.0
    semi2: object = 0.0
    con: object = 0.0
    mac: object = 0.0
    total: object = 0.0

    def as_floats(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out


def total_loss(sup1, sup2, semi1=0.0, semi2=0.0, con=0.0, mac=0.0,
               weights=LossWeights(), toggles=Ablation()):
    """Weighted joint objective. Components whose toggle is off are zeroed."""
    if not toggles.semi:
        semi1 = semi2 = 0.0
    if not toggles.con:
        con = 0.0
    if not toggles.mac:
        mac = 0.0
    total = (sup1 + sup2) + weights.lam * (semi1 + semi2) + weights.tau * con + weights.beta * mac
    return LossBundle(sup1, sup2, semi1, semi2, con, mac, total)

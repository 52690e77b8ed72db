"""Objective functions: segmentation CE, adversarial, discriminator BCE,
the three distillation losses, and the combined distillation objective.

All functions operate on torch tensors with the class/channel axis last
(shape (..., H, W, C) for probabilities, (..., H, W) for labels, and a
single trailing channel squeezed away for discriminator fields), so
analytic gradients come from autograd and can be checked against finite
differences in double precision. Teacher-side inputs are always detached:
no gradient ever flows into a frozen teacher.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .core import IGNORE, DistillConfig, KLDirection, Paradigm, Reduction

EPS = 1e-12

DISTILL_TERMS = ("kl_out", "kl_feat", "mse", "pseudo")


@dataclass
class LossValue:
    """A scalar loss plus its named components.

    `value` keeps the autograd graph; `breakdown` holds detached floats
    whose sum reproduces `value` (weights already folded in)."""

    value: torch.Tensor
    breakdown: dict = field(default_factory=dict)
    all_ignore: bool = False

    def item(self) -> float:
        return float(self.value.detach())


def _reduce(per_pixel: torch.Tensor, reduction: Reduction) -> torch.Tensor:
    if reduction is Reduction.MEAN:
        return per_pixel.mean()
    return per_pixel.sum()


def _clamp_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(min=EPS))


def seg_ce(probs: torch.Tensor, gt: torch.Tensor,
           reduction: Reduction = Reduction.MEAN) -> LossValue:
    """Cross entropy of per-pixel probabilities against integer labels.

    IGNORE pixels are excluded from the reduction; an all-IGNORE label map
    yields loss 0 with the `all_ignore` flag set.
    """
    if probs.shape[:-1] != gt.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs gt {tuple(gt.shape)}")
    mask = gt != IGNORE
    n = int(mask.sum())
    if n == 0:
        zero = probs.sum() * 0.0
        return LossValue(zero, {"seg_ce": 0.0}, all_ignore=True)
    safe_gt = torch.where(mask, gt, torch.zeros_like(gt))
    picked = torch.gather(probs, -1, safe_gt.unsqueeze(-1)).squeeze(-1)
    nll = -_clamp_log(picked)[mask]
    loss = _reduce(nll, reduction)
    return LossValue(loss, {"seg_ce": float(loss.detach())})


def adv_generator(disc_src_prob: torch.Tensor,
                  reduction: Reduction = Reduction.MEAN) -> LossValue:
    """Generator-side adversarial loss: -log D(P_target) against the
    source-domain channel, driving target predictions to fool the
    discriminator."""
    d = disc_src_prob.clamp(EPS, 1.0 - EPS)
    loss = _reduce(-torch.log(d), reduction)
    return LossValue(loss, {"adv": float(loss.detach())})


def disc_bce(src_prob: torch.Tensor, is_source: bool,
             reduction: Reduction = Reduction.MEAN) -> LossValue:
    """Binary cross entropy for the discriminator; label 1 = SOURCE,
    0 = TARGET."""
    d = src_prob.clamp(EPS, 1.0 - EPS)
    per_pixel = -torch.log(d) if is_source else -torch.log1p(-d)
    loss = _reduce(per_pixel, reduction)
    return LossValue(loss, {"disc_bce": float(loss.detach())})


def kl_distill(student_probs: torch.Tensor, teacher_probs: torch.Tensor,
               weight: float,
               direction: KLDirection = KLDirection.STUDENT_FIRST,
               reduction: Reduction = Reduction.MEAN,
               name: str = "kl") -> LossValue:
    """Weighted per-pixel KL divergence between student and teacher
    distributions; the teacher side is detached."""
    if student_probs.shape != teacher_probs.shape:
        raise ValueError(
            f"shape mismatch: student {tuple(student_probs.shape)} vs "
            f"teacher {tuple(teacher_probs.shape)}")
    t = teacher_probs.detach()
    s = student_probs
    if direction is KLDirection.STUDENT_FIRST:
        p, q = s, t
    else:
        p, q = t, s
    per_pixel = (p * (_clamp_log(p) - _clamp_log(q))).sum(dim=-1)
    loss = weight * _reduce(per_pixel, reduction)
    return LossValue(loss, {name: float(loss.detach())})


def mse_distill(student_feat: torch.Tensor, teacher_feat: torch.Tensor,
                weight: float, reduction: Reduction = Reduction.MEAN) -> LossValue:
    """Weighted squared error between feature maps; the smaller map is
    upsampled bilinearly (corner-aligned) first, the teacher is detached.
    Channel widths must agree (the presets are built that way)."""
    if student_feat.shape[-1] != teacher_feat.shape[-1]:
        raise ValueError(
            f"feature channel mismatch: student D={student_feat.shape[-1]} vs "
            f"teacher D={teacher_feat.shape[-1]}; configure an adapter")
    s, t = student_feat, teacher_feat.detach()
    if s.shape != t.shape:
        s, t = _equalize_spatial(s, t)
    per_pixel = ((s - t) ** 2).sum(dim=-1)
    loss = weight * _reduce(per_pixel, reduction)
    return LossValue(loss, {"mse": float(loss.detach())})


def _equalize_spatial(s: torch.Tensor, t: torch.Tensor):
    """Upsample the spatially smaller of two (..., h, w, D) maps to match."""
    def area(x):
        return x.shape[-3] * x.shape[-2]

    small, big = (s, t) if area(s) < area(t) else (t, s)
    x = small.movedim(-1, -3)
    if x.dim() == 3:
        x = x.unsqueeze(0)
        x = F.interpolate(x, size=big.shape[-3:-1], mode="bilinear",
                          align_corners=True)
        x = x.squeeze(0)
    else:
        x = F.interpolate(x, size=big.shape[-3:-1], mode="bilinear",
                          align_corners=True)
    resized = x.movedim(-3, -1)
    return (resized, big) if area(s) < area(t) else (big, resized)


def pseudo_ce(student_probs: torch.Tensor, teacher_pseudo: torch.Tensor,
              weight: float, reduction: Reduction = Reduction.MEAN) -> LossValue:
    """Cross entropy against the teacher's argmax pseudo labels, scaled by
    `weight`; computationally identical to seg_ce with gt = pseudo labels."""
    base = seg_ce(student_probs, teacher_pseudo, reduction)
    loss = weight * base.value
    return LossValue(loss, {"pseudo": float(loss.detach())},
                     all_ignore=base.all_ignore)


def distill_objective(src_terms: dict, tgt_terms: dict,
                      cfg: DistillConfig) -> LossValue:
    """Combine per-domain distillation terms per the paradigm schedule.

    Paradigm A keeps only source terms, B and D only target terms, C keeps
    both with the target side scaled by lambda_target. Each term already
    carries its own lambda weight.
    """
    use_src = cfg.paradigm in (Paradigm.A, Paradigm.C)
    use_tgt = cfg.paradigm in (Paradigm.B, Paradigm.C, Paradigm.D)
    total = None
    breakdown = {}
    for name in DISTILL_TERMS:
        breakdown[f"src_{name}"] = 0.0
        breakdown[f"tgt_{name}"] = 0.0
    if use_src:
        for name in DISTILL_TERMS:
            lv = src_terms.get(name)
            if lv is None:
                continue
            total = lv.value if total is None else total + lv.value
            breakdown[f"src_{name}"] = float(lv.value.detach())
    if use_tgt:
        for name in DISTILL_TERMS:
            lv = tgt_terms.get(name)
            if lv is None:
                continue
            scaled = cfg.lambda_target * lv.value
            total = scaled if total is None else total + scaled
            breakdown[f"tgt_{name}"] = float(scaled.detach())
    if total is None:
        total = torch.zeros(())
    return LossValue(total, breakdown)

"""Differentiable objectives over per-pixel class distributions.

All functions take ``CxHxW`` probability masks. Targets are either ``HxW`` integer label
masks (``IGNORE_LABEL`` pixels get zero weight) or ``CxHxW`` distributions. Optional
``weights`` are ``HxW`` masks in ``{0, 1}``; a zero weight removes the pixel from both the
value and the gradient.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .core import IGNORE_LABEL

PROB_FLOOR = 1e-8
SUM_TOLERANCE = 1e-5


def _check_probs(probs: torch.Tensor, name: str = "probs") -> None:
    if probs.dim() != 3:
        raise ValueError(f"{name} must be CxHxW, got shape {tuple(probs.shape)}")
    err = (probs.detach().sum(dim=0) - 1.0).abs().max().item()
    if err > SUM_TOLERANCE:
        raise ValueError(f"{name} rows must sum to 1 (max deviation {err:.2e})")


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """HxW labels -> CxHxW float one-hot; ignored pixels become all-zero columns."""
    valid = labels != IGNORE_LABEL
    if bool(((labels >= num_classes) & valid).any()) or bool((labels < 0).any()):
        raise ValueError(f"labels must lie in [0, {num_classes}) or equal {IGNORE_LABEL}")
    safe = torch.where(valid, labels, torch.zeros_like(labels)).long()
    out = F.one_hot(safe, num_classes).permute(2, 0, 1).to(torch.get_default_dtype())
    return out * valid.unsqueeze(0)


def _resolve(
    probs: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None
) -> tuple[torch.Tensor, torch.Tensor]:
    _check_probs(probs)
    c, h, w = probs.shape
    if target.dtype in (torch.int64, torch.int32, torch.uint8, torch.int16):
        if tuple(target.shape) != (h, w):
            raise ValueError(f"label target shape {tuple(target.shape)} does not match {(h, w)}")
        valid = (target != IGNORE_LABEL).to(probs.dtype)
        t = one_hot(target, c).to(probs.dtype)
    else:
        if target.shape != probs.shape:
            raise ValueError(f"target shape {tuple(target.shape)} does not match {tuple(probs.shape)}")
        valid = torch.ones((h, w), dtype=probs.dtype, device=probs.device)
        t = target.to(probs.dtype)
    if weights is not None:
        if tuple(weights.shape) != (h, w):
            raise ValueError(f"weights shape {tuple(weights.shape)} does not match {(h, w)}")
        valid = valid * weights.to(probs.dtype)
    if float(valid.sum()) <= 0:
        raise ValueError("all pixel weights are zero")
    return t.detach(), valid.detach()


def soft_iou_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    weights: torch.Tensor | None = None,
    eps: float = 1.0,
) -> torch.Tensor:
    """1 - mean over scored classes of (sum p*t + eps) / (sum p + sum t - sum p*t + eps).

    A class is scored when it is the argmax of ``probs`` at some weighted pixel or carries
    target mass; classes absent from both are left out of the mean.
    """
    t, w = _resolve(probs, target, weights)
    p = probs * w
    t = t * w
    inter = (p * t).sum(dim=(1, 2))
    sp = p.sum(dim=(1, 2))
    st = t.sum(dim=(1, 2))
    iou = (inter + eps) / (sp + st - inter + eps)
    hard = one_hot(probs.detach().argmax(dim=0), probs.shape[0]).to(probs.dtype) * w
    present = ((hard.sum(dim=(1, 2)) + st.detach()) > 0).to(iou.dtype)
    return 1.0 - (iou * present).sum() / present.sum()


def ce_loss(probs: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    t, w = _resolve(probs, target, weights)
    per_pixel = -(t * torch.log(probs.clamp(min=PROB_FLOOR, max=1.0))).sum(dim=0)
    return (per_pixel * w).sum() / w.sum()


def entropy_map(probs: torch.Tensor) -> torch.Tensor:
    return -(probs * torch.log(probs.clamp(min=PROB_FLOOR, max=1.0))).sum(dim=0)


def entropy_loss(probs: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel prediction entropy ``H = -sum_c p_c log p_c``."""
    _check_probs(probs)
    return entropy_map(probs).mean()


def reverse_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """(1/N) sum_i sum_c q log(q / p), with ``q`` treated as a constant."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    _check_probs(p, "p")
    q = q.detach()
    per_pixel = torch.special.xlogy(q, q) - q * torch.log(p.clamp(min=PROB_FLOOR, max=1.0))
    return per_pixel.sum(dim=0).mean()


def mean_entropy(logits: torch.Tensor) -> float:
    with torch.no_grad():
        return float(entropy_map(logits.softmax(dim=0)).mean())

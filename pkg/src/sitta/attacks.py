"""Targeted FGSM / PGD with inverted-mask targets.

Gradients are taken with respect to the input image only (``torch.autograd.grad``), so
model parameters and their ``.grad`` fields are never touched. Projection is clipping to
``[0, 1]`` plus an optional L-infinity budget around the clean image.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import storage
from .core import DivergenceError, ModelAdapter
from .losses import ce_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 10
    step_size: float = 1.0 / 255.0
    budget: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("attack steps must be >= 0")
        if not 0.0 <= self.step_size <= 1.0:
            raise ValueError("attack step size must lie in [0, 1]")
        if self.budget is not None and self.budget < 0:
            raise ValueError("attack budget must be >= 0")


@dataclass(frozen=True)
class AttackStep:
    t: int
    image: torch.Tensor
    logits: torch.Tensor


def inverted_target(probs: torch.Tensor) -> torch.Tensor:
    """Zero mass on the predicted class, uniform over the others (ties -> lowest index)."""
    c = probs.shape[0]
    if c < 2:
        raise ValueError("mask inversion needs at least two classes")
    pred = probs.argmax(dim=0)
    onehot = torch.nn.functional.one_hot(pred, c).permute(2, 0, 1).to(probs.dtype)
    return ((1.0 - onehot) / (c - 1)).detach()


def _targeted_grad(model: ModelAdapter, image: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    x = image.detach().clone().requires_grad_(True)
    loss = ce_loss(model(x).softmax(dim=0), target)
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise DivergenceError("non-finite gradient with respect to the input image")
    return grad


def fgsm_step(model: ModelAdapter, image: torch.Tensor, target: torch.Tensor, step: float) -> torch.Tensor:
    """One signed-gradient step that lowers the cross-entropy to ``target``."""
    if step == 0:
        return image.detach().clone()
    grad = _targeted_grad(model, image, target)
    return (image.detach() - step * grad.sign()).clamp(0.0, 1.0)


def pgd_attack(
    model: ModelAdapter, image: torch.Tensor, target: torch.Tensor, cfg: AttackConfig
) -> list[AttackStep]:
    """Iterated FGSM from the clean image (no random start); returns steps 1..cfg.steps."""
    clean = image.detach()
    current = clean.clone()
    out: list[AttackStep] = []
    for t in range(1, cfg.steps + 1):
        current = fgsm_step(model, current, target, cfg.step_size)
        if cfg.budget is not None:
            current = torch.max(torch.min(current, clean + cfg.budget), clean - cfg.budget).clamp(0.0, 1.0)
        with torch.no_grad():
            logits = model(current)
        out.append(AttackStep(t=t, image=current, logits=logits))
    return out


def save_trajectory(
    directory: str | Path,
    image_id: str,
    clean_logits: torch.Tensor,
    steps: Sequence[AttackStep],
    cfg: AttackConfig,
) -> list[Path]:
    """Dump per-iteration logits as ``<id>__t<t>.npz`` with a JSON sidecar each (t=0 is clean)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    items = [(0, clean_logits)] + [(s.t, s.logits) for s in steps]
    for t, logits in items:
        stem = f"{image_id}__t{t:02d}"
        np.savez_compressed(directory / f"{stem}.npz", logits=logits.detach().cpu().numpy())
        sidecar = {"image_id": image_id, "t": t, "step": cfg.step_size, "seed": cfg.seed, "array": f"{stem}.npz"}
        storage.validate_row(sidecar, "trajectory_step")
        path = directory / f"{stem}.json"
        path.write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
        written.append(path)
    return written


def load_trajectory(directory: str | Path, image_id: str) -> list[tuple[int, torch.Tensor]]:
    directory = Path(directory)
    out = []
    for side in sorted(directory.glob(f"{image_id}__t*.json")):
        meta = json.loads(side.read_text(encoding="utf-8"))
        storage.validate_row(meta, "trajectory_step")
        with np.load(directory / meta["array"]) as data:
            out.append((int(meta["t"]), torch.from_numpy(data["logits"])))
    return sorted(out, key=lambda item: item[0])

"""Learned auxiliaries: the mask refiner and the deep-IoU estimator.

Both consume segmenter logit masks only and are trained on masks the segmenter produces
on adversarially perturbed source images. Neither ever updates segmenter weights.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import storage
from .attacks import AttackConfig, inverted_target, pgd_attack
from .core import IGNORE_LABEL, ModelAdapter, argmax_labels
from .losses import soft_iou_loss

logger = logging.getLogger(__name__)

TargetKind = Literal["predictions", "ground-truth"]
DEFAULT_HARVEST: tuple[int, ...] = (2, 4, 6, 8, 10)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def _standardize(x: torch.Tensor) -> torch.Tensor:
    mean = x.mean(dim=(2, 3), keepdim=True)
    std = x.std(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / (std + 1e-5)


class Refiner(nn.Module):
    """Two-level U-Net over logit masks with a residual path to the input logits."""

    def __init__(self, num_classes: int, width: int = 16) -> None:
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.enc1 = _block(num_classes, width)
        self.enc2 = _block(width, 2 * width)
        self.mid = _block(2 * width, 4 * width)
        self.dec2 = _block(4 * width + 2 * width, 2 * width)
        self.dec1 = _block(2 * width + width, width)
        self.head = nn.Conv2d(width, num_classes, 1)
        self.train_history: list[float] = []

    def forward(self, logits: torch.Tensor) -> torch.Tensor:
        single = logits.dim() == 3
        x = logits.unsqueeze(0) if single else logits
        e1 = self.enc1(_standardize(x))
        e2 = self.enc2(F.max_pool2d(e1, 2, ceil_mode=True))
        m = self.mid(F.max_pool2d(e2, 2, ceil_mode=True))
        d2 = F.interpolate(m, size=e2.shape[-2:], mode="bilinear", align_corners=False)
        d2 = self.dec2(torch.cat([d2, e2], dim=1))
        d1 = F.interpolate(d2, size=e1.shape[-2:], mode="bilinear", align_corners=False)
        d1 = self.dec1(torch.cat([d1, e1], dim=1))
        out = x + self.head(d1)
        return out[0] if single else out


class IoUEstimator(nn.Module):
    """Strided conv encoder -> global average pool -> 2-layer head -> sigmoid.

    Works on the softmax of the input logits so the estimate does not depend on logit scale.
    """

    def __init__(self, num_classes: int, width: int = 16) -> None:
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        self.encoder = nn.Sequential(
            nn.Conv2d(num_classes, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Sequential(nn.Linear(4 * width, 2 * width), nn.ReLU(inplace=True), nn.Linear(2 * width, 1))
        self.train_history: list[float] = []

    def forward(self, logits: torch.Tensor) -> torch.Tensor:
        single = logits.dim() == 3
        x = logits.unsqueeze(0) if single else logits
        feats = self.encoder(x.softmax(dim=1)).mean(dim=(2, 3))
        out = torch.sigmoid(self.head(feats)).squeeze(1)
        return out[0] if single else out


@dataclass(frozen=True)
class RefinerPair:
    corrupted: torch.Tensor  # CxHxW logits from the attack trajectory
    target: torch.Tensor  # HxW labels (clean prediction or ground truth)
    image_id: str
    t: int
    target_kind: TargetKind = "predictions"


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def gen_refiner_pairs(
    model: ModelAdapter,
    images: Sequence[tuple[str, torch.Tensor, torch.Tensor | None]],
    attack_cfg: AttackConfig,
    target_kind: TargetKind = "predictions",
    harvest: Sequence[int] = DEFAULT_HARVEST,
) -> list[RefinerPair]:
    """(corrupted mask at attack step t, clean target) for every image and harvested t."""
    if target_kind not in ("predictions", "ground-truth"):
        raise ValueError(f"unknown target kind {target_kind!r}")
    bad = [t for t in harvest if not 0 <= t <= attack_cfg.steps]
    if bad:
        raise ValueError(f"harvest iterations {bad} outside 0..{attack_cfg.steps}")
    pairs: list[RefinerPair] = []
    for image_id, image, gt in images:
        if target_kind == "ground-truth" and gt is None:
            raise ValueError(f"image {image_id!r} has no ground truth for target kind 'ground-truth'")
        with torch.no_grad():
            clean_logits = model(image)
        target = argmax_labels(clean_logits) if target_kind == "predictions" else gt.long()
        steps = pgd_attack(model, image, inverted_target(clean_logits.softmax(dim=0)), attack_cfg)
        for t in harvest:
            corrupted = clean_logits if t == 0 else steps[t - 1].logits
            pairs.append(RefinerPair(corrupted.detach(), target.detach(), image_id, t, target_kind))
    return pairs


def split_pairs_by_image(
    pairs: Sequence[RefinerPair], val_fraction: float = 0.1, seed: int = 0
) -> tuple[list[RefinerPair], list[RefinerPair]]:
    ids = sorted({p.image_id for p in pairs})
    random.Random(seed).shuffle(ids)
    n_val = int(round(len(ids) * val_fraction))
    if len(ids) > 1:
        n_val = min(max(n_val, 1), len(ids) - 1)
    else:
        n_val = 0
    val_ids = set(ids[:n_val])
    return [p for p in pairs if p.image_id not in val_ids], [p for p in pairs if p.image_id in val_ids]


def _stack(pairs: Sequence[RefinerPair]) -> tuple[torch.Tensor, torch.Tensor]:
    if not pairs:
        raise ValueError("at least one pair is required")
    shape = pairs[0].corrupted.shape
    for p in pairs:
        if p.corrupted.shape != shape or tuple(p.target.shape) != tuple(shape[1:]):
            raise ValueError(f"inconsistent pair shapes: {tuple(p.corrupted.shape)} vs {tuple(shape)}")
    return torch.stack([p.corrupted for p in pairs]).float(), torch.stack([p.target for p in pairs]).long()


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_refiner(
    pairs: Sequence[RefinerPair],
    epochs: int = 20,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 8,
    val_pairs: Sequence[RefinerPair] | None = None,
    width: int = 16,
) -> Refiner:
    x, y = _stack(pairs)
    torch.manual_seed(seed)
    refiner = Refiner(x.shape[1], width=width)
    opt = torch.optim.Adam(refiner.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        refiner.train()
        total = 0.0
        for idx in _batches(len(x), batch_size, gen):
            opt.zero_grad()
            loss = F.cross_entropy(refiner(x[idx]), y[idx], ignore_index=IGNORE_LABEL)
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        refiner.train_history.append(total / len(x))
        msg = f"refiner epoch {epoch + 1}/{epochs} ce={refiner.train_history[-1]:.4f}"
        if val_pairs:
            vx, vy = _stack(val_pairs)
            refiner.eval()
            with torch.no_grad():
                msg += f" val_ce={float(F.cross_entropy(refiner(vx), vy, ignore_index=IGNORE_LABEL)):.4f}"
        logger.info(msg)
    return freeze(refiner)


def refine(refiner: nn.Module, logits: torch.Tensor) -> torch.Tensor:
    """Softmax of the refined logits; evaluation mode, no gradient."""
    expected = getattr(refiner, "num_classes", None)
    channels = logits.shape[-3]
    if expected is not None and channels != expected:
        raise ValueError(f"refiner expects {expected} channels, got {channels}")
    refiner.eval()
    with torch.no_grad():
        out = refiner(logits)
    if out.shape != logits.shape:
        raise ValueError(f"refiner output shape {tuple(out.shape)} differs from input {tuple(logits.shape)}")
    return out.softmax(dim=-3)


def diou_labels(pairs: Sequence[RefinerPair]) -> list[tuple[torch.Tensor, float]]:
    """Soft-IoU loss of each corrupted mask against its clean target."""
    out = []
    for p in pairs:
        with torch.no_grad():
            label = float(soft_iou_loss(p.corrupted.float().softmax(dim=0), p.target.long()))
        out.append((p.corrupted, label))
    return out


def train_diou(
    samples: Sequence[tuple[torch.Tensor, float]],
    epochs: int = 20,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 8,
    width: int = 16,
) -> IoUEstimator:
    if not samples:
        raise ValueError("at least one sample is required")
    for _, label in samples:
        if not 0.0 <= label <= 1.0:
            raise ValueError(f"IoU-loss labels must lie in [0, 1], got {label}")
    shape = samples[0][0].shape
    if any(s[0].shape != shape for s in samples):
        raise ValueError("inconsistent sample shapes")
    x = torch.stack([s[0] for s in samples]).float()
    y = torch.tensor([s[1] for s in samples], dtype=torch.float32)
    torch.manual_seed(seed)
    est = IoUEstimator(x.shape[1], width=width)
    opt = torch.optim.Adam(est.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        est.train()
        total = 0.0
        for idx in _batches(len(x), batch_size, gen):
            opt.zero_grad()
            loss = F.mse_loss(est(x[idx]), y[idx])
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        est.train_history.append(total / len(x))
        logger.info("dIoU epoch %d/%d mse=%.5f", epoch + 1, epochs, est.train_history[-1])
    return freeze(est)


def predict_iou_loss(est: nn.Module, logits: torch.Tensor) -> torch.Tensor:
    """Estimated IoU loss in [0, 1]; differentiable with respect to ``logits``."""
    expected = getattr(est, "num_classes", None)
    if expected is not None and logits.shape[-3] != expected:
        raise ValueError(f"estimator expects {expected} channels, got {logits.shape[-3]}")
    est.eval()
    return est(logits)


def save_auxiliary(module: Refiner | IoUEstimator, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "refiner" if isinstance(module, Refiner) else "diou"
    torch.save(
        {"kind": kind, "num_classes": module.num_classes, "width": module.width, "state_dict": module.state_dict()},
        path,
    )
    return path


def _load(path: str | Path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"auxiliary checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("kind") != kind:
        raise ValueError(f"{path} holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    return payload


def load_refiner(path: str | Path) -> Refiner:
    payload = _load(path, "refiner")
    model = Refiner(int(payload["num_classes"]), int(payload["width"]))
    model.load_state_dict(payload["state_dict"])
    return freeze(model)


def load_estimator(path: str | Path) -> IoUEstimator:
    payload = _load(path, "diou")
    model = IoUEstimator(int(payload["num_classes"]), int(payload["width"]))
    model.load_state_dict(payload["state_dict"])
    return freeze(model)


def save_pairs(pairs: Sequence[RefinerPair], directory: str | Path, step: float, seed: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for p in pairs:
        stem = f"{p.image_id}__t{p.t:02d}"
        np.savez_compressed(
            directory / f"{stem}.npz", logits=p.corrupted.cpu().numpy(), target=p.target.cpu().numpy()
        )
        sidecar = {
            "image_id": p.image_id,
            "t": p.t,
            "step": step,
            "seed": seed,
            "array": f"{stem}.npz",
            "target_kind": p.target_kind,
        }
        storage.validate_row(sidecar, "trajectory_step")
        (directory / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def load_pairs(directory: str | Path) -> list[RefinerPair]:
    directory = Path(directory)
    pairs = []
    for side in sorted(directory.glob("*.json")):
        meta = json.loads(side.read_text(encoding="utf-8"))
        storage.validate_row(meta, "trajectory_step")
        with np.load(directory / meta["array"]) as data:
            pairs.append(
                RefinerPair(
                    torch.from_numpy(data["logits"]),
                    torch.from_numpy(data["target"]).long(),
                    meta["image_id"],
                    int(meta["t"]),
                    meta.get("target_kind", "predictions"),
                )
            )
    return pairs

"""Desk-scale assets: a seeded synthetic-shapes dataset and a small segmenter.

Classes: 0 background, 1 circle, 2 rectangle, 3 triangle. Each shape class has its own
hue range, so the toy segmenter learns colour and shape cues that corruptions disturb.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from . import storage
from .core import IGNORE_LABEL, ModelAdapter, image_to_tensor, register_architecture, save_adapter

logger = logging.getLogger(__name__)

CLASS_NAMES = ("background", "circle", "rectangle", "triangle")
CLASS_COLORS = {
    1: (0.85, 0.25, 0.20),
    2: (0.20, 0.75, 0.30),
    3: (0.25, 0.35, 0.85),
}


@dataclass(frozen=True)
class ShapesSpec:
    size: int = 96
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 3
    radius: tuple[int, int] = (10, 24)
    color_jitter: float = 0.12
    brightness: tuple[float, float] = (0.75, 1.1)
    background: tuple[float, float] = (0.35, 0.65)
    texture: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes != 4:
            raise ValueError("the shapes dataset has exactly 4 classes")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")


@dataclass
class ShapesDataset:
    ids: list[str] = field(default_factory=list)
    images: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)

    def write(self, root: str | Path) -> Path:
        return storage.write_dataset(root, self.ids, self.images, self.masks)

    @classmethod
    def read(cls, root: str | Path) -> "ShapesDataset":
        ds = storage.Dataset(root)
        return cls(ds.ids, [ds.image(i) for i in ds.ids], [ds.mask(i) for i in ds.ids])


def expected_class_presence(spec: ShapesSpec) -> float:
    """Probability that a given shape class is drawn at least once in an image."""
    counts = np.arange(spec.min_shapes, spec.max_shapes + 1)
    miss = (1.0 - 1.0 / (spec.num_classes - 1)) ** counts
    return float(1.0 - miss.mean())


def _shape_mask(kind: int, size: int, rng: np.random.Generator, radius: tuple[int, int]) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # radii shrink with the canvas so every centre range stays non-empty
    hi = min(float(radius[1]), size / 2.5)
    r = rng.uniform(min(float(radius[0]), hi), hi)
    cx, cy = rng.uniform(r * 0.6, size - r * 0.6, 2)
    if kind == 1:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
    if kind == 2:
        a, b = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        return (np.abs(xx - cx) <= a) & (np.abs(yy - cy) <= b)
    angle = rng.uniform(0, 2 * np.pi)
    pts = [(cx + r * np.cos(angle + k * 2 * np.pi / 3), cy + r * np.sin(angle + k * 2 * np.pi / 3)) for k in range(3)]

    def side(p, q):
        return (xx - q[0]) * (p[1] - q[1]) - (p[0] - q[0]) * (yy - q[1])

    d1, d2, d3 = side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def make_shapes_dataset(n: int, spec: ShapesSpec = ShapesSpec()) -> ShapesDataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(spec.seed)
    ds = ShapesDataset()
    s = spec.size
    for idx in range(n):
        bg = rng.uniform(*spec.background, size=3)
        texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (s, s)), 4.0)
        texture = texture / (np.abs(texture).max() + 1e-8) * spec.texture
        image = np.broadcast_to(bg, (s, s, 3)) + texture[..., None]
        mask = np.zeros((s, s), dtype=np.int64)
        for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
            kind = int(rng.integers(1, spec.num_classes))
            region = _shape_mask(kind, s, rng, spec.radius)
            color = np.clip(
                (np.array(CLASS_COLORS[kind]) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3))
                * rng.uniform(*spec.brightness),
                0.0,
                1.0,
            )
            shade = 1.0 + rng.normal(0.0, 0.03, (s, s))
            image = np.where(region[..., None], color * shade[..., None], image)
            mask[region] = kind
        ds.ids.append(f"shape{idx:05d}")
        ds.images.append(np.clip(image, 0.0, 1.0).astype(np.float32))
        ds.masks.append(mask)
    return ds


def _cbr(cin: int, cout: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToySegmenter(nn.Module):
    """Small encoder-decoder with four BatchNorm layers."""

    def __init__(self, num_classes: int = 4, width: int = 16) -> None:
        super().__init__()
        self.stem = _cbr(3, width)
        self.down = _cbr(width, 2 * width, stride=2)
        self.context = _cbr(2 * width, 2 * width, dilation=2)
        self.fuse = _cbr(3 * width, width)
        self.head = nn.Conv2d(width, num_classes, 1)
        self.train_history: list[float] = []

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.stem(x)
        c = self.context(self.down(s))
        u = F.interpolate(c, size=s.shape[-2:], mode="bilinear", align_corners=False)
        return self.head(self.fuse(torch.cat([u, s], dim=1)))


@register_architecture("toy")
def _toy(num_classes: int) -> nn.Module:
    return ToySegmenter(num_classes)


def train_toy_segmenter(
    dataset: ShapesDataset,
    epochs: int = 30,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 16,
    checkpoint: str | Path | None = None,
) -> ModelAdapter:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    num_classes = len(CLASS_NAMES)
    model = ModelAdapter(ToySegmenter(num_classes), num_classes, arch="toy")
    x = torch.stack([image_to_tensor(im) for im in dataset.images])
    y = torch.stack([torch.from_numpy(m) for m in dataset.masks]).long()
    opt = torch.optim.Adam(model.module.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    history = model.module.train_history
    for epoch in range(epochs):
        model.train()
        total = 0.0
        for idx in torch.randperm(len(x), generator=gen).split(batch_size):
            opt.zero_grad()
            loss = F.cross_entropy(model.module(x[idx]), y[idx], ignore_index=IGNORE_LABEL)
            loss.backward()
            opt.step()
            total += float(loss) * len(idx)
        history.append(total / len(x))
        logger.info("toy segmenter epoch %d/%d ce=%.4f", epoch + 1, epochs, history[-1])
    model.eval()
    if checkpoint is not None:
        save_adapter(model, checkpoint)
    return model

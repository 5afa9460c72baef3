"""Synthetic corruption operators and derivation of a corrupted adaptation corpus.

Images are ``HxWx3`` float arrays in ``[0, 1]``. Every operator is a pure function of
``(image, CorruptionSpec)``: randomness comes only from ``spec.seed``, and the result is
always clipped to ``[0, 1]``.
"""
from __future__ import annotations

import io
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import storage

logger = logging.getLogger(__name__)

KINDS: tuple[str, ...] = (
    "brightness",
    "contrast",
    "frost",
    "fog",
    "gaussian-noise",
    "shot-noise",
    "spatter",
    "defocus-blur",
    "gaussian-blur",
    "jpeg",
    "identity",
)
DEFAULT_LEVELS: tuple[int, ...] = (1, 3, 5)
# Nine corruptions plus identity; frost is left out so 40 images x 10 kinds x 3 levels = 1200.
DEFAULT_KINDS: tuple[str, ...] = (
    "brightness",
    "contrast",
    "fog",
    "gaussian-noise",
    "shot-noise",
    "spatter",
    "defocus-blur",
    "gaussian-blur",
    "jpeg",
    "identity",
)

# Severity parameters for levels 1..5 (common-corruptions parameterization, [0, 1] intensities).
SEVERITY: Mapping[str, tuple] = {
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),
    # x_c = x + b (x - mean); b = c - 1 for the usual contrast factors c = .4 .3 .2 .1 .05
    "contrast": (-0.6, -0.7, -0.8, -0.9, -0.95),
    "frost": ((1.0, 0.4), (0.8, 0.6), (0.7, 0.7), (0.65, 0.7), (0.6, 0.75)),
    # (b1: fog strength and wibble, b2: wibble decay per subdivision)
    "fog": ((1.5, 2.0), (2.0, 2.0), (2.5, 1.7), (2.5, 1.5), (3.0, 1.4)),
    "gaussian-noise": (0.08, 0.12, 0.18, 0.26, 0.38),
    "shot-noise": (60.0, 25.0, 12.0, 5.0, 3.0),
    # (loc, scale, sigma, threshold, intensity, mode) mode 0 = water, 1 = mud
    "spatter": (
        (0.65, 0.3, 4.0, 0.69, 0.6, 0),
        (0.65, 0.3, 3.0, 0.68, 0.6, 0),
        (0.65, 0.3, 2.0, 0.68, 0.5, 0),
        (0.65, 0.3, 1.0, 0.65, 1.5, 1),
        (0.67, 0.4, 1.0, 0.65, 1.5, 1),
    ),
    # (disk radius, alias blur sigma)
    "defocus-blur": ((3, 0.1), (4, 0.5), (6, 0.5), (8, 0.5), (10, 0.5)),
    "gaussian-blur": (1.0, 2.0, 3.0, 4.0, 6.0),
    "jpeg": (25, 18, 15, 10, 7),
}

WATER_COLOR = np.array([0.93, 0.93, 0.69])
MUD_COLOR = np.array([0.25, 0.16, 0.08])


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    level: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"Unknown corruption kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind != "identity" and not 1 <= self.level <= 5:
            raise ValueError(f"corruption level must be in 1..5, got {self.level}")

    @property
    def param(self):
        return SEVERITY[self.kind][self.level - 1]


def diamond_square(size: int, wibble: float, seed: int, decay: float = 2.0) -> np.ndarray:
    """Square heightmap of side ``2**k + 1`` rescaled to [0, 1].

    Corners are drawn uniformly; each subdivision adds uniform displacement of amplitude
    ``wibble`` which is divided by ``decay`` after every level. New points average pairs of
    opposite neighbours, so ``wibble=0`` reproduces bilinear interpolation of the corners.
    """
    k = int(round(np.log2(size - 1))) if size > 2 else 0
    if size < 3 or 2**k + 1 != size:
        raise ValueError(f"size must be 2**k + 1 with k >= 1, got {size}")
    rng = np.random.default_rng(seed)
    h = np.zeros((size, size), dtype=np.float64)
    last = size - 1
    h[0, 0], h[0, last], h[last, 0], h[last, last] = rng.uniform(0.0, 1.0, 4)
    step = last
    amp = float(wibble)
    while step > 1:
        half = step // 2
        # diamond: centres of squares
        for i in range(half, size, step):
            for j in range(half, size, step):
                avg = (h[i - half, j - half] + h[i - half, j + half] + h[i + half, j - half] + h[i + half, j + half]) / 4.0
                h[i, j] = avg + amp * rng.uniform(-1.0, 1.0)
        # square: edge midpoints
        for i in range(0, size, half):
            for j in range((i + half) % step, size, step):
                pairs = []
                if 0 <= j - half and j + half <= last:
                    pairs.append((h[i, j - half] + h[i, j + half]) / 2.0)
                if 0 <= i - half and i + half <= last:
                    pairs.append((h[i - half, j] + h[i + half, j]) / 2.0)
                h[i, j] = sum(pairs) / len(pairs) + amp * rng.uniform(-1.0, 1.0)
        step = half
        amp /= decay
    lo, hi = h.min(), h.max()
    if hi - lo <= 0:
        return np.zeros_like(h)
    return (h - lo) / (hi - lo)


def _heightmap_for(shape: tuple[int, int], wibble: float, seed: int, decay: float) -> np.ndarray:
    side = max(shape)
    size = 2 ** int(np.ceil(np.log2(max(side - 1, 2)))) + 1
    return diamond_square(size, wibble, seed, decay)[: shape[0], : shape[1]]


@lru_cache(maxsize=4)
def frost_templates(seed: int = 7, size: int = 257) -> tuple[np.ndarray, ...]:
    """Three procedural frost textures (ice streaks from thresholded heightmaps)."""
    out = []
    for n in range(3):
        h = diamond_square(size, 1.0, seed + n, decay=1.6)
        ridges = 1.0 - np.abs(2.0 * h - 1.0)
        streaks = np.clip((ridges - 0.6) / 0.4, 0.0, 1.0) ** 1.5
        streaks = ndimage.gaussian_filter(streaks, 0.6)
        tex = streaks[..., None] * np.array([0.85, 0.92, 1.0])
        out.append(tex.astype(np.float64))
    return tuple(out)


def _brightness(x, b, rng):
    return x + b


def _contrast(x, b, rng):
    mean = x.mean(axis=(0, 1), keepdims=True)
    return x + b * (x - mean)


def _gaussian_noise(x, b, rng):
    return x + rng.normal(0.0, b, size=x.shape)


def _shot_noise(x, b, rng):
    return rng.poisson(x * b) / b


def _gaussian_blur(x, b, rng):
    return ndimage.gaussian_filter(x, sigma=(b, b, 0), mode="reflect")


def _disk(radius: int, alias_blur: float) -> np.ndarray:
    ax = np.arange(-radius, radius + 1)
    xx, yy = np.meshgrid(ax, ax)
    disk = (xx**2 + yy**2 <= radius**2).astype(np.float64)
    disk = ndimage.gaussian_filter(disk, alias_blur)
    return disk / disk.sum()


def _defocus_blur(x, b, rng):
    kernel = _disk(int(b[0]), float(b[1]))
    return np.stack([ndimage.convolve(x[..., ch], kernel, mode="reflect") for ch in range(3)], axis=-1)


def _jpeg(x, b, rng):
    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)).save(buf, format="JPEG", quality=int(b))
    buf.seek(0)
    return np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255.0


def _fog(x, b, rng):
    strength, decay = b
    hm = _heightmap_for(x.shape[:2], strength, int(rng.integers(2**31)), decay)
    top = x.max()
    return (x + strength * hm[..., None]) * top / (top + strength)


def _frost(x, b, rng):
    w_img, w_frost = b
    template = frost_templates()[int(rng.integers(3))]
    h, w = x.shape[:2]
    th, tw = template.shape[:2]
    if th < h or tw < w:
        template = np.pad(template, ((0, max(0, h - th)), (0, max(0, w - tw)), (0, 0)), mode="wrap")
        th, tw = template.shape[:2]
    top = int(rng.integers(0, th - h + 1))
    left = int(rng.integers(0, tw - w + 1))
    return w_img * x + w_frost * template[top : top + h, left : left + w]


def _spatter(x, b, rng):
    loc, scale, sigma, threshold, intensity, mode = b
    liquid = ndimage.gaussian_filter(rng.normal(loc, scale, size=x.shape[:2]), sigma)
    mask = ndimage.gaussian_filter((liquid > threshold).astype(np.float64), 1.0)
    alpha = np.clip(mask * intensity, 0.0, 1.0)[..., None]
    color = WATER_COLOR if mode == 0 else MUD_COLOR
    if mode == 0:
        alpha = alpha * 0.6
    return x * (1.0 - alpha) + color * alpha


_OPERATORS: Mapping[str, Callable] = {
    "brightness": _brightness,
    "contrast": _contrast,
    "frost": _frost,
    "fog": _fog,
    "gaussian-noise": _gaussian_noise,
    "shot-noise": _shot_noise,
    "spatter": _spatter,
    "defocus-blur": _defocus_blur,
    "gaussian-blur": _gaussian_blur,
    "jpeg": _jpeg,
}


def apply_corruption(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("image contains non-finite values")
    if spec.kind == "identity":
        return x.astype(np.float32)
    op = _OPERATORS.get(spec.kind)
    if op is None:
        raise ValueError(f"Unknown corruption kind {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    return np.clip(op(x, spec.param, rng), 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class CorpusEntry:
    image_id: str
    kind: str
    level: int
    seed: int
    path: str
    source_path: str = ""

    @property
    def spec(self) -> CorruptionSpec:
        return CorruptionSpec(self.kind, self.level, self.seed)

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.image_id, self.kind, self.level)


@dataclass
class CorpusIndex:
    entries: list[CorpusEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def to_jsonl(self, path: str | Path) -> Path:
        return storage.write_jsonl(path, [asdict(e) for e in self.entries], schema="corpus_entry")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "CorpusIndex":
        return cls([CorpusEntry(**row) for row in storage.read_jsonl(path, schema="corpus_entry")])


def entry_name(image_id: str, kind: str, level: int) -> str:
    return f"images/{image_id}__{kind}__L{level}.png"


def _entry_seed(seed: int, image_idx: int, kind: str, level: int) -> int:
    ss = np.random.SeedSequence([seed, image_idx, KINDS.index(kind), level])
    return int(ss.generate_state(1)[0])


def derive_corrupted_dataset(
    images: Sequence[str],
    kinds: Iterable[str] = DEFAULT_KINDS,
    levels: Iterable[int] = DEFAULT_LEVELS,
    seed: int = 0,
    source_paths: Mapping[str, str] | None = None,
) -> CorpusIndex:
    """One entry per (image, kind, level); identity is replicated at every level."""
    kinds = list(kinds)
    levels = list(levels)
    if not images:
        raise ValueError("at least one image is required")
    if not kinds:
        raise ValueError("at least one corruption kind is required")
    if not levels:
        raise ValueError("at least one level is required")
    for lvl in levels:
        if lvl not in (1, 3, 5):
            raise ValueError(f"levels must be a subset of {{1, 3, 5}}, got {lvl}")
    for k in kinds:
        CorruptionSpec(k, 1)
    if len(set(images)) != len(images):
        raise ValueError("image ids must be unique")
    if len(set(kinds)) != len(kinds):
        raise ValueError(f"corruption kinds must be unique, got {kinds}")
    if len(set(levels)) != len(levels):
        raise ValueError(f"levels must be unique, got {levels}")
    source_paths = source_paths or {}
    entries = [
        CorpusEntry(
            image_id=img,
            kind=kind,
            level=lvl,
            seed=_entry_seed(seed, i, kind, lvl),
            path=entry_name(img, kind, lvl),
            source_path=source_paths.get(img, ""),
        )
        for i, img in enumerate(images)
        for kind in kinds
        for lvl in levels
    ]
    return CorpusIndex(entries)


def materialize_corpus(
    index: CorpusIndex, load_image: Callable[[str], np.ndarray], root: str | Path
) -> Path:
    """Write every corrupted image under ``root`` plus ``index.jsonl``."""
    root = Path(root)
    cache: dict[str, np.ndarray] = {}
    for entry in index:
        if entry.image_id not in cache:
            cache = {entry.image_id: load_image(entry.image_id)}
        out = apply_corruption(cache[entry.image_id], entry.spec)
        storage.write_image(root / entry.path, out)
    index.to_jsonl(root / "index.jsonl")
    logger.info("materialized %d corrupted images under %s", len(index), root)
    return root / "index.jsonl"

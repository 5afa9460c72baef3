"""Single-image test-time adaptation.

Each method is a per-iteration objective over the current segmenter. ``adapt_single_image``
runs plain SGD on the scoped parameters for at most ten iterations and always restores the
pretrained weights before returning, so every image starts from the same snapshot.
"""
from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torch import nn

from .attacks import fgsm_step, inverted_target
from .auxnets import predict_iou_loss, refine
from .core import (
    DivergenceError,
    MissingAuxiliaryError,
    ModelAdapter,
    ParamScope,
    argmax_labels,
    restore_weights,
    scoped_requires_grad,
    select_params,
    snapshot_weights,
)
from .losses import ce_loss, entropy_loss, mean_entropy, reverse_kl, soft_iou_loss
from .metrics import confusion_counts, image_miou

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 10


class Method(str, Enum):
    ENT = "Ent"
    PL = "PL"
    AUGCO = "AugCo"
    ADV = "Adv"
    REF = "Ref"
    DIOU = "dIoU"


class LossKind(str, Enum):
    CE = "ce"
    IOU = "iou"
    ENT = "ent"
    KL = "kl"
    NONE = "none"


VALID_LOSSES: Mapping[Method, tuple[LossKind, ...]] = {
    Method.ENT: (LossKind.ENT,),
    Method.PL: (LossKind.CE, LossKind.IOU),
    Method.AUGCO: (LossKind.CE, LossKind.IOU),
    Method.ADV: (LossKind.KL,),
    Method.REF: (LossKind.CE, LossKind.IOU),
    Method.DIOU: (LossKind.NONE,),
}


@dataclass(frozen=True)
class TTAConfig:
    method: Method
    loss: LossKind
    scope: ParamScope = ParamScope.FULL
    lr: float = 1e-3
    iterations: int = MAX_ITERATIONS
    seed: int = 0
    # AugCo
    crop_area: tuple[float, float] = (0.25, 0.50)
    tau_conf: float = 0.8
    jitter: float = 0.2
    # Adv
    fgsm_step: float = 1.0 / 255.0
    # PL
    tau_pl: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "scope", ParamScope(self.scope))
        if self.loss not in VALID_LOSSES[self.method]:
            allowed = ", ".join(l.value for l in VALID_LOSSES[self.method])
            raise ValueError(f"{self.method.value} does not support loss {self.loss.value!r} (allowed: {allowed})")
        if not 0 <= self.iterations <= MAX_ITERATIONS:
            raise ValueError(f"iterations must lie in [0, {MAX_ITERATIONS}], got {self.iterations}")
        if self.lr < 0 or not np.isfinite(self.lr):
            raise ValueError(f"learning rate must be a finite non-negative number, got {self.lr}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        lo, hi = self.crop_area
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop area fractions must satisfy 0 < lo <= hi <= 1, got {self.crop_area}")

    @property
    def column(self) -> str:
        return f"{self.method.value}/{self.loss.value}/{self.scope.value}"

    @property
    def key(self) -> str:
        """Identity of a grid cell; the iteration count is chosen later from the trace."""
        return f"{self.column}/lr={self.lr!r}"


@dataclass
class AuxModels:
    refiner: nn.Module | None = None
    estimator: nn.Module | None = None


@dataclass(frozen=True)
class IterationTrace:
    index: int
    objective: float | None
    mask: np.ndarray = field(repr=False)
    entropy: float
    miou_i: float | None


@dataclass
class AdaptationRecord:
    image_id: str
    config: TTAConfig
    trace: list[IterationTrace]
    diverged: bool = False
    seconds: float = 0.0

    @property
    def na(self) -> IterationTrace:
        return self.trace[0]

    @property
    def final(self) -> IterationTrace:
        return self.trace[-1]

    @property
    def masks(self) -> list[np.ndarray]:
        return [t.mask for t in self.trace]

    def to_row(self, kind: str = "identity", level: int = 0) -> dict:
        if any(t.miou_i is None for t in self.trace):
            raise ValueError(
                f"{self.image_id} has no m̄IoU_i: no ground truth was given or every pixel is ignored"
            )
        cfg = self.config
        return {
            "image_id": self.image_id,
            "kind": kind,
            "level": level,
            "config": cfg.key,
            "method": cfg.method.value,
            "loss": cfg.loss.value,
            "scope": cfg.scope.value,
            "lr": cfg.lr,
            "miou_i": [t.miou_i for t in self.trace],
            "entropy": [t.entropy for t in self.trace],
            "na_miou_i": self.na.miou_i,
            "na_entropy": self.na.entropy,
            "diverged": self.diverged,
        }


def _mask_loss(cfg: TTAConfig, probs: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None):
    if cfg.loss is LossKind.IOU:
        return soft_iou_loss(probs, labels, weights)
    return ce_loss(probs, labels, weights)


def _objective_ent(model, image, aux, cfg, iteration, stream):
    return entropy_loss(model(image).softmax(dim=0))


def _objective_pl(model, image, aux, cfg, iteration, stream):
    probs = model(image).softmax(dim=0)
    labels = argmax_labels(probs.detach())
    weights = None
    if cfg.tau_pl > 0:
        weights = (probs.detach().max(dim=0).values >= cfg.tau_pl).to(probs.dtype)
        if not weights.any():
            return probs.sum() * 0.0
    return _mask_loss(cfg, probs, labels, weights)


def _objective_ref(model, image, aux, cfg, iteration, stream):
    logits = model(image)
    refined = refine(aux.refiner, logits.detach())
    return _mask_loss(cfg, logits.softmax(dim=0), argmax_labels(refined))


def _objective_diou(model, image, aux, cfg, iteration, stream):
    return predict_iou_loss(aux.estimator, model(image))


def _objective_adv(model, image, aux, cfg, iteration, stream):
    probs = model(image).softmax(dim=0)
    perturbed = fgsm_step(model, image, inverted_target(probs.detach()), cfg.fgsm_step)
    with torch.no_grad():
        q = model(perturbed).softmax(dim=0)
    return reverse_kl(probs, q)


def random_box(height: int, width: int, area: tuple[float, float], gen: torch.Generator) -> tuple[int, int, int, int]:
    """(top, left, h, w) covering a uniform area fraction in ``area``, aspect ratio preserved."""
    lo, hi = area
    frac = lo + (hi - lo) * float(torch.rand((), generator=gen))
    scale = frac**0.5
    h = max(1, int(round(height * scale)))
    w = max(1, int(round(width * scale)))
    top = int(torch.randint(0, height - h + 1, (), generator=gen))
    left = int(torch.randint(0, width - w + 1, (), generator=gen))
    return top, left, h, w


def _crop_resize(x: torch.Tensor, box: tuple[int, int, int, int], size: tuple[int, int]) -> torch.Tensor:
    top, left, h, w = box
    crop = x[:, top : top + h, left : left + w]
    return F.interpolate(crop.unsqueeze(0), size=size, mode="bilinear", align_corners=False)[0]


def color_jitter(image: torch.Tensor, strength: float, gen: torch.Generator) -> torch.Tensor:
    factors = 1.0 + strength * (2.0 * torch.rand(3, generator=gen) - 1.0)
    out = TF.adjust_brightness(image, float(factors[0]))
    out = TF.adjust_contrast(out, float(factors[1]))
    return TF.adjust_saturation(out, float(factors[2])).clamp(0.0, 1.0)


def augco_reliability(view1: torch.Tensor, view2: torch.Tensor, tau_conf: float) -> torch.Tensor:
    """Pixel is reliable iff the views agree on the argmax OR view 2 is confident."""
    if view1.shape != view2.shape:
        raise ValueError(f"view shapes differ: {tuple(view1.shape)} vs {tuple(view2.shape)}")
    consistent = argmax_labels(view1) == argmax_labels(view2)
    confident = view2.max(dim=0).values >= tau_conf
    return (consistent | confident).to(view2.dtype)


def image_stream(image_id: str) -> int:
    return zlib.crc32(image_id.encode("utf-8"))


def augco_generator(seed: int, stream: int, iteration: int) -> torch.Generator:
    """Crop and jitter draws for one iteration on one image."""
    state = np.random.SeedSequence([seed, stream, iteration]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def _objective_augco(model, image, aux, cfg, iteration, stream):
    gen = augco_generator(cfg.seed, stream, iteration)
    size = tuple(image.shape[-2:])
    with torch.no_grad():
        full = model(image).softmax(dim=0)
    box = random_box(size[0], size[1], cfg.crop_area, gen)
    view1 = _crop_resize(full, box, size)
    augmented = _crop_resize(color_jitter(image, cfg.jitter, gen), box, size)
    view2 = model(augmented).softmax(dim=0)
    weights = augco_reliability(view1, view2.detach(), cfg.tau_conf)
    if not weights.any():
        return view2.sum() * 0.0
    return _mask_loss(cfg, view2, argmax_labels(view2.detach()), weights)


_OBJECTIVES: Mapping[Method, Callable] = {
    Method.ENT: _objective_ent,
    Method.PL: _objective_pl,
    Method.REF: _objective_ref,
    Method.DIOU: _objective_diou,
    Method.ADV: _objective_adv,
    Method.AUGCO: _objective_augco,
}


def _check_aux(method: Method, aux: AuxModels | None) -> None:
    if method is Method.REF and (aux is None or aux.refiner is None):
        raise MissingAuxiliaryError("method Ref needs a trained mask refiner")
    if method is Method.DIOU and (aux is None or aux.estimator is None):
        raise MissingAuxiliaryError("method dIoU needs a trained IoU estimator")


def compute_objective(
    method: Method | str,
    model: ModelAdapter,
    image: torch.Tensor,
    aux: AuxModels | None,
    cfg: TTAConfig,
    iteration: int = 1,
    stream: int = 0,
) -> torch.Tensor:
    method = Method(method)
    _check_aux(method, aux)
    return _OBJECTIVES[method](model, image, aux, cfg, iteration, stream)


def _observe(model: ModelAdapter, image: torch.Tensor, gt, index: int, objective: float | None) -> IterationTrace:
    with torch.no_grad():
        logits = model(image)
    mask = argmax_labels(logits).cpu().numpy()
    score = None
    if gt is not None:
        score = image_miou(confusion_counts(mask, np.asarray(gt), model.num_classes))
    return IterationTrace(index, objective, mask, mean_entropy(logits), score)


def adapt_single_image(
    model: ModelAdapter,
    image: torch.Tensor,
    cfg: TTAConfig,
    aux: AuxModels | None = None,
    gt: np.ndarray | torch.Tensor | None = None,
    image_id: str = "image",
) -> AdaptationRecord:
    """Adapt to one image from the current (pretrained) weights, then restore them."""
    _check_aux(cfg.method, aux)
    if isinstance(gt, torch.Tensor):
        gt = gt.cpu().numpy()
    params = select_params(model, cfg.scope)
    snap = snapshot_weights(model)
    stream = image_stream(image_id)
    start = time.perf_counter()
    na = _observe(model, image, gt, 0, None)
    trace = [na]
    diverged = False
    try:
        with scoped_requires_grad(model, params):
            opt = torch.optim.SGD(params, lr=cfg.lr, momentum=0.0, weight_decay=0.0)
            for i in range(1, cfg.iterations + 1):
                opt.zero_grad(set_to_none=True)
                loss = compute_objective(cfg.method, model, image, aux, cfg, iteration=i, stream=stream)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite objective at iteration {i}")
                if loss.requires_grad:
                    loss.backward()
                    if any(p.grad is not None and not torch.isfinite(p.grad).all() for p in params):
                        raise DivergenceError(f"non-finite gradient at iteration {i}")
                    opt.step()
                trace.append(_observe(model, image, gt, i, float(loss)))
    except DivergenceError as e:
        logger.warning("%s on %s diverged (%s); reporting the unadapted result", cfg.key, image_id, e)
        diverged = True
        trace = [na] + [replace(na, index=i) for i in range(1, cfg.iterations + 1)]
    finally:
        restore_weights(model, snap)
    return AdaptationRecord(image_id, cfg, trace, diverged, time.perf_counter() - start)


def refine_prediction(model: ModelAdapter, image: torch.Tensor, refiner: nn.Module) -> np.ndarray:
    """Refined mask used directly as the prediction, without touching segmenter weights."""
    with torch.no_grad():
        logits = model(image)
    return argmax_labels(refine(refiner, logits)).cpu().numpy()


def expand_grid(
    methods: Iterable[Method | str],
    losses: Iterable[LossKind | str],
    scopes: Iterable[ParamScope | str],
    lrs: Iterable[float],
    iterations: int = MAX_ITERATIONS,
    seed: int = 0,
) -> list[TTAConfig]:
    """Every valid (method, loss, scope, lr); single-loss methods use their own loss."""
    wanted = {LossKind(l) for l in losses}
    configs = []
    for m in map(Method, methods):
        allowed = VALID_LOSSES[m]
        chosen = allowed if len(allowed) == 1 else tuple(l for l in allowed if l in wanted)
        for loss in chosen:
            for scope in map(ParamScope, scopes):
                for lr in lrs:
                    configs.append(TTAConfig(m, loss, scope, float(lr), iterations, seed))
    return configs

from __future__ import annotations

import hashlib
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255

# Layers whose affine weight/bias make up the norm-affine scope.
NORM_LAYERS: tuple[type[nn.Module], ...] = (
    nn.BatchNorm1d,
    nn.BatchNorm2d,
    nn.BatchNorm3d,
    nn.GroupNorm,
    nn.LayerNorm,
    nn.InstanceNorm1d,
    nn.InstanceNorm2d,
    nn.InstanceNorm3d,
)


class SittaError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SittaError, ValueError):
    pass


class MissingAuxiliaryError(SittaError):
    pass


class DivergenceError(SittaError):
    pass


class ParamScope(str, Enum):
    FULL = "full"
    NORM_AFFINE = "norm-affine"


@dataclass(frozen=True)
class ParamRef:
    name: str
    param: nn.Parameter
    is_norm_affine: bool


class ModelAdapter:
    """Uniform handle over a segmentation network.

    Forwards always run with the wrapped module in evaluation mode, so normalization
    running statistics are read but never updated. Images are ``3xHxW`` (or ``Nx3xHxW``)
    tensors in ``[0, 1]``; outputs are ``CxHxW`` (or ``NxCxHxW``) logits.
    """

    def __init__(self, module: nn.Module, num_classes: int, arch: str = "custom") -> None:
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.module = module
        self.num_classes = int(num_classes)
        self.arch = arch
        self.module.eval()

    @property
    def training(self) -> bool:
        return self.module.training

    def eval(self) -> "ModelAdapter":
        self.module.eval()
        return self

    def train(self) -> "ModelAdapter":
        # Only used when fitting a segmenter from scratch (testbed); adaptation never calls it.
        self.module.train()
        return self

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if self.module.training:
            self.module.eval()
        single = image.dim() == 3
        batch = image.unsqueeze(0) if single else image
        logits = self.module(batch)
        if logits.shape[1] != self.num_classes:
            raise ValueError(f"model produced {logits.shape[1]} channels, expected {self.num_classes}")
        return logits[0] if single else logits

    __call__ = forward

    def parameters(self) -> list[ParamRef]:
        norm_ids: set[int] = set()
        for mod in self.module.modules():
            if isinstance(mod, NORM_LAYERS):
                for p in (getattr(mod, "weight", None), getattr(mod, "bias", None)):
                    if isinstance(p, nn.Parameter):
                        norm_ids.add(id(p))
        return [
            ParamRef(name=name, param=p, is_norm_affine=id(p) in norm_ids)
            for name, p in self.module.named_parameters()
        ]

    def replica(self) -> "ModelAdapter":
        import copy

        return ModelAdapter(copy.deepcopy(self.module), self.num_classes, self.arch)


@dataclass(frozen=True)
class WeightSnapshot:
    tensors: dict[str, torch.Tensor] = field(repr=False)

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}


def snapshot_weights(model: ModelAdapter) -> WeightSnapshot:
    return WeightSnapshot({ref.name: ref.param.detach().clone() for ref in model.parameters()})


def restore_weights(model: ModelAdapter, snap: WeightSnapshot) -> None:
    refs = model.parameters()
    if len(refs) != len(snap.tensors):
        raise ValueError(
            f"snapshot has {len(snap.tensors)} parameters, model has {len(refs)}"
        )
    for ref in refs:
        saved = snap.tensors.get(ref.name)
        if saved is None:
            raise ValueError(f"snapshot lacks parameter {ref.name!r}")
        if saved.shape != ref.param.shape:
            raise ValueError(
                f"shape mismatch for {ref.name!r}: snapshot {tuple(saved.shape)}, model {tuple(ref.param.shape)}"
            )
    with torch.no_grad():
        for ref in refs:
            ref.param.copy_(snap.tensors[ref.name])
            ref.param.grad = None


def select_params(model: ModelAdapter, scope: ParamScope | str) -> list[nn.Parameter]:
    scope = ParamScope(scope)
    refs = model.parameters()
    if scope is ParamScope.FULL:
        return [r.param for r in refs]
    chosen = [r.param for r in refs if r.is_norm_affine]
    if not chosen:
        raise ValueError("scope 'norm-affine' selected but the model has no normalization affine parameters")
    return chosen


def weights_hash(model: ModelAdapter) -> str:
    h = hashlib.sha256()
    for ref in sorted(model.parameters(), key=lambda r: r.name):
        h.update(ref.name.encode("utf-8"))
        h.update(ref.param.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextmanager
def scoped_requires_grad(model: ModelAdapter, params: list[nn.Parameter]) -> Iterator[None]:
    """Temporarily make only ``params`` require gradients."""
    keep = {id(p) for p in params}
    saved = [(r.param, r.param.requires_grad) for r in model.parameters()]
    try:
        for p, _ in saved:
            p.requires_grad_(id(p) in keep)
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)
            p.grad = None


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 float image in [0, 1] -> 3xHxW float32 tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def tensor_to_image(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32)


def argmax_labels(scores: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index: ties go to the lowest class.
    return scores.argmax(dim=-3)


# Architecture registry: name -> factory(num_classes) -> nn.Module
_ARCHITECTURES: dict[str, Callable[[int], nn.Module]] = {}


def register_architecture(name: str) -> Callable[[Callable[[int], nn.Module]], Callable[[int], nn.Module]]:
    def deco(factory: Callable[[int], nn.Module]) -> Callable[[int], nn.Module]:
        _ARCHITECTURES[name] = factory
        return factory

    return deco


def known_architectures() -> list[str]:
    _ensure_builtin()
    return sorted(_ARCHITECTURES)


def _ensure_builtin() -> None:
    if "toy" not in _ARCHITECTURES:
        from . import testbed  # noqa: F401  (registers "toy")


def build_adapter(arch: str, num_classes: int) -> ModelAdapter:
    _ensure_builtin()
    factory = _ARCHITECTURES.get(arch)
    if factory is None:
        raise ValueError(f"Unknown architecture {arch!r}; known: {', '.join(sorted(_ARCHITECTURES))}")
    return ModelAdapter(factory(num_classes), num_classes, arch)


def save_adapter(model: ModelAdapter, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"arch": model.arch, "num_classes": model.num_classes, "state_dict": model.module.state_dict()},
        path,
    )
    return path


def load_adapter(checkpoint: str | Path, arch: str | None = None) -> ModelAdapter:
    path = Path(checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    stored_arch = payload.get("arch")
    if arch is not None and stored_arch not in (None, arch):
        raise ValueError(f"checkpoint was saved for architecture {stored_arch!r}, not {arch!r}")
    model = build_adapter(arch or stored_arch, int(payload["num_classes"]))
    model.module.load_state_dict(payload["state_dict"])
    model.eval()
    logger.info("loaded %s checkpoint from %s", model.arch, path)
    return model

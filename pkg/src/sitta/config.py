"""Experiment configuration: one YAML file fully determines a run.

Relative paths resolve against the directory of the config file. ``SITTA_OUTPUT_DIR``
overrides ``output_dir``.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .core import ConfigError, ParamScope
from .corruptions import DEFAULT_KINDS, DEFAULT_LEVELS, KINDS
from .tta import MAX_ITERATIONS, VALID_LOSSES, LossKind, Method, TTAConfig, expand_grid

OUTPUT_ENV = "SITTA_OUTPUT_DIR"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    checkpoint: Path = Field(Path("model.pt"), description="Segmenter checkpoint written by save_adapter")
    arch: str = "toy"


class DatasetSection(_Section):
    root: Path = Path("data")


class TestbedSection(_Section):
    n_images: int = Field(40, ge=1)
    size: int = Field(96, ge=16)
    epochs: int = Field(30, ge=1)
    lr: float = Field(3e-3, gt=0)
    batch_size: int = Field(16, ge=1)


class CorruptionSection(_Section):
    kinds: list[str] = Field(default_factory=lambda: list(DEFAULT_KINDS))
    levels: list[int] = Field(default_factory=lambda: list(DEFAULT_LEVELS))
    seed: int = Field(0, ge=0)

    @field_validator("kinds")
    @classmethod
    def _known_kinds(cls, v: list[str]) -> list[str]:
        unknown = [k for k in v if k not in KINDS]
        if unknown:
            raise ValueError(f"unknown corruption kinds {unknown}; known: {', '.join(KINDS)}")
        if not v:
            raise ValueError("at least one corruption kind is required")
        if len(set(v)) != len(v):
            raise ValueError("corruption kinds must be unique")
        return v

    @field_validator("levels")
    @classmethod
    def _levels(cls, v: list[int]) -> list[int]:
        if not v or any(lvl not in (1, 3, 5) for lvl in v):
            raise ValueError("levels must be a nonempty subset of [1, 3, 5]")
        if len(set(v)) != len(v):
            raise ValueError("levels must be unique")
        return v


class AuxSection(_Section):
    refiner: Path | None = None
    estimator: Path | None = None
    target_kind: Literal["predictions", "ground-truth"] = "predictions"
    epochs: int = Field(20, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(8, ge=1)
    val_fraction: float = Field(0.1, ge=0, lt=1)


class AttackSection(_Section):
    steps: int = Field(10, ge=1)
    step_size: float = Field(1.0 / 255.0, ge=0, le=1)
    budget: float | None = Field(None, ge=0)


class GridSection(_Section):
    methods: list[Method] = Field(default_factory=lambda: list(Method))
    losses: list[LossKind] = Field(default_factory=lambda: [LossKind.CE, LossKind.IOU])
    scopes: list[ParamScope] = Field(default_factory=lambda: list(ParamScope))
    lrs: list[float] = Field(default_factory=lambda: [1e-4, 1e-3, 1e-2])
    iterations: int = Field(MAX_ITERATIONS, ge=0, le=MAX_ITERATIONS)
    granularity: Literal["overall", "per-corruption", "per-level"] = "overall"

    @field_validator("lrs")
    @classmethod
    def _lrs(cls, v: list[float]) -> list[float]:
        if not v or any(lr < 0 for lr in v):
            raise ValueError("lrs must be a nonempty list of non-negative numbers")
        return v

    @model_validator(mode="after")
    def _losses_cover_methods(self) -> "GridSection":
        for m in self.methods:
            allowed = VALID_LOSSES[m]
            if len(allowed) > 1 and not any(l in allowed for l in self.losses):
                raise ValueError(f"no listed loss applies to method {m.value}")
        return self


class ExperimentConfig(_Section):
    output_dir: Path = Path("runs")
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    model: ModelSection = Field(default_factory=ModelSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    testbed: TestbedSection = Field(default_factory=TestbedSection)
    corruptions: CorruptionSection = Field(default_factory=CorruptionSection)
    aux: AuxSection = Field(default_factory=AuxSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    grid: GridSection = Field(default_factory=GridSection)

    def resolved(self, base: Path) -> "ExperimentConfig":
        """Copy with relative paths anchored at ``base`` and the output override applied."""

        def anchor(p: Path | None) -> Path | None:
            if p is None or p.is_absolute():
                return p
            return base / p

        out = self.model_copy(deep=True)
        env = os.getenv(OUTPUT_ENV)
        out.output_dir = Path(env) if env else anchor(out.output_dir)
        out.model.checkpoint = anchor(out.model.checkpoint)
        out.dataset.root = anchor(out.dataset.root)
        out.aux.refiner = anchor(out.aux.refiner)
        out.aux.estimator = anchor(out.aux.estimator)
        return out

    def tta_configs(self) -> list[TTAConfig]:
        g = self.grid
        return expand_grid(g.methods, g.losses, g.scopes, g.lrs, g.iterations, self.seed)

    # Artifact locations under output_dir
    @property
    def corpus_dir(self) -> Path:
        return self.output_dir / "corpus"

    @property
    def results_dir(self) -> Path:
        return self.output_dir / "results"

    @property
    def report_dir(self) -> Path:
        return self.output_dir / "report"

    @property
    def pairs_dir(self) -> Path:
        return self.output_dir / "pairs"


def _node_lines(node: yaml.Node, path: tuple = ()) -> dict[tuple, int]:
    lines = {path: node.start_mark.line + 1}
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            child = path + (key.value,)
            lines.update(_node_lines(value, child))
            lines[child] = key.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            lines.update(_node_lines(item, path + (i,)))
    return lines


def _line_for(loc: tuple, lines: dict[tuple, int]) -> int | None:
    loc = tuple(str(p) if not isinstance(p, int) else p for p in loc)
    for end in range(len(loc), -1, -1):
        if loc[:end] in lines:
            return lines[loc[:end]]
    return None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text)
        data: Any = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{source}: {where}invalid YAML: {getattr(e, 'problem', e)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: line 1: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        lines = _node_lines(root) if root is not None else {}
        problems = []
        for err in e.errors():
            loc = tuple(p for p in err["loc"])
            line = _line_for(loc, lines)
            field = ".".join(str(p) for p in loc) or "<root>"
            prefix = f"line {line}: " if line is not None else ""
            problems.append(f"{prefix}{field}: {err['msg']}")
        raise ConfigError(f"{source}: invalid configuration\n  " + "\n  ".join(problems)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(encoding="utf-8"), source=str(path))
    return cfg.resolved(path.resolve().parent)


def default_config(base: str | Path = ".") -> ExperimentConfig:
    return ExperimentConfig().resolved(Path(base).resolve())

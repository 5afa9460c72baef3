"""On-disk layout: 8-bit images and masks, JSON-lines indexes validated against shipped schemas.

Dataset layout::

    <root>/images/<id>.png       8-bit RGB
    <root>/masks/<id>.png        single-channel class indices, 255 = ignore
    <root>/index.jsonl           {"id", "image", "mask"} per line
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
from jsonschema import Draft202012Validator
from PIL import Image


@lru_cache(maxsize=None)
def _validator(schema: str) -> Draft202012Validator:
    text = resources.files("sitta").joinpath("schema").joinpath(f"{schema}.json").read_text(encoding="utf-8")
    return Draft202012Validator(json.loads(text))


def validate_row(row: dict, schema: str) -> None:
    errors = sorted(_validator(schema).iter_errors(row), key=lambda e: list(e.path))
    if errors:
        where = "/".join(str(p) for p in errors[0].path) or "<row>"
        raise ValueError(f"invalid {schema} row at {where}: {errors[0].message}")


def write_jsonl(path: str | Path, rows: Iterable[dict], schema: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            if schema:
                validate_row(row, schema)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def append_jsonl(path: str | Path, row: dict, schema: str | None = None) -> None:
    """Append one row as a single write followed by fsync."""
    if schema:
        validate_row(row, schema)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(row, sort_keys=True) + "\n"
    if path.is_file() and path.stat().st_size:
        with path.open("rb") as fh:
            fh.seek(-1, os.SEEK_END)
            if fh.read(1) != b"\n":
                # Terminate a torn line left by an interrupted writer.
                line = "\n" + line
    with path.open("a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()
        os.fsync(fh.fileno())


def read_jsonl(path: str | Path, schema: str | None = None) -> Iterator[dict[str, Any]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                # A torn final line from an interrupted append is dropped.
                continue
            if schema:
                try:
                    validate_row(row, schema)
                except ValueError as e:
                    raise ValueError(f"{path}:{lineno}: {e}") from None
            yield row


def write_image(path: str | Path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_mask(path: str | Path, mask: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.min() < 0 or arr.max() > 255:
        raise ValueError("masks must be 2-D with values in 0..255")
    Image.fromarray(arr.astype(np.uint8)).save(path)
    return path


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).astype(np.int64)


@dataclass(frozen=True)
class DatasetItem:
    image_id: str
    image: str
    mask: str


class Dataset:
    """Read access to a dataset root in the layout above."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        index = self.root / "index.jsonl"
        if not index.is_file():
            raise FileNotFoundError(f"dataset index not found: {index}")
        self.items = [
            DatasetItem(row["id"], row["image"], row["mask"]) for row in read_jsonl(index, schema="dataset_entry")
        ]
        self._by_id = {it.image_id: it for it in self.items}

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> list[str]:
        return [it.image_id for it in self.items]

    def image(self, image_id: str) -> np.ndarray:
        return read_image(self.root / self._by_id[image_id].image)

    def mask(self, image_id: str) -> np.ndarray:
        return read_mask(self.root / self._by_id[image_id].mask)


def write_dataset(root: str | Path, ids: list[str], images: list[np.ndarray], masks: list[np.ndarray]) -> Path:
    root = Path(root)
    rows = []
    for image_id, img, msk in zip(ids, images, masks):
        write_image(root / "images" / f"{image_id}.png", img)
        write_mask(root / "masks" / f"{image_id}.png", msk)
        rows.append({"id": image_id, "image": f"images/{image_id}.png", "mask": f"masks/{image_id}.png"})
    return write_jsonl(root / "index.jsonl", rows, schema="dataset_entry")

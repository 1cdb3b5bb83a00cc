"""Artifact I/O: PNG rasters and append-only JSONL manifests."""

from __future__ import annotations

import json
import os
import threading
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set

import numpy as np
from PIL import Image

from utils.errors import UserInputError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".webp")


@lru_cache(maxsize=256)
def _load_image_cached(path: str, mtime_ns: int) -> np.ndarray:
    with Image.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    array.setflags(write=False)
    return array


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an RGB image as a read-only ``H x W x 3`` uint8 array.

    Raises a UserInputError with a readable message if the file is missing or
    cannot be decoded.
    """

    path = Path(path)
    if not path.is_file():
        raise UserInputError(f"Image not found: {path}")
    try:
        return _load_image_cached(str(path.resolve()), path.stat().st_mtime_ns)
    except OSError as exc:
        raise UserInputError(f"Could not decode image {path}: {exc}") from exc


def save_image(path: str | os.PathLike, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")
    return path


def load_mask(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UserInputError(f"Mask not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127


def save_mask(path: str | os.PathLike, mask: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path, format="PNG")
    return path


def list_images(directory: str | os.PathLike) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise UserInputError(f"Source directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_jsonl(path: str | os.PathLike) -> List[Dict[str, Any]]:
    """Read every JSON object of a JSONL file; blank lines are ignored."""

    path = Path(path)
    if not path.is_file():
        raise UserInputError(f"Manifest not found: {path}")
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise UserInputError(f"{path}:{lineno} is not valid JSON ({exc.msg}).") from exc
    return rows


def write_jsonl(path: str | os.PathLike, rows: Iterable[Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


class ManifestWriter:
    """Append-only, line-atomic JSONL writer shared by worker threads."""

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh = self.path.open("a", encoding="utf-8")

    def append(self, row: Dict[str, Any]) -> None:
        line = json.dumps(row, sort_keys=True) + "\n"
        with self._lock:
            self._fh.write(line)
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self) -> "ManifestWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def completed_ids(path: str | os.PathLike, key: str = "id") -> Set[str]:
    """Ids already present in a manifest; missing manifests have none."""

    path = Path(path)
    if not path.is_file():
        return set()
    return {str(row[key]) for row in read_jsonl(path) if key in row}


def resolve_path(path: str, root: Optional[str | os.PathLike]) -> Path:
    candidate = Path(path)
    if candidate.is_absolute() or root is None:
        return candidate
    return Path(root) / candidate

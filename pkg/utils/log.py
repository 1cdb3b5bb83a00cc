"""Logging helpers."""

from __future__ import annotations

import logging
import sys
from typing import Iterable, Optional, TypeVar

from tqdm import tqdm

_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"
_ROOT = "outcrop"

T = TypeVar("T")


def get_logger(name: str) -> logging.Logger:
    """Return a logger namespaced under the toolkit's root logger."""

    if name.startswith(_ROOT):
        return logging.getLogger(name)
    return logging.getLogger(f"{_ROOT}.{name}")


def configure_logging(verbosity: int = 0) -> None:
    """Install a stderr handler; 0 = WARNING, 1 = INFO, 2+ = DEBUG."""

    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG

    root = logging.getLogger(_ROOT)
    root.setLevel(level)
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_FORMAT))
        root.addHandler(handler)
    root.propagate = False


def progress(iterable: Iterable[T], desc: str, quiet: bool = False, total: Optional[int] = None) -> tqdm:
    """tqdm progress bar on stderr, off when ``quiet`` or when stderr is not a terminal."""

    return tqdm(iterable, desc=desc, total=total, disable=quiet or not sys.stderr.isatty())

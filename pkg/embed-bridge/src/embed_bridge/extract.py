"""Folder-to-embedding-file extraction.

Output conforms to the engine's ingestion grammar: optional `#` comment
lines, a `<dim> <N>` header, then N whitespace-separated float rows written
with repr so values round-trip exactly.  The bridge never imports the
engine; the file format is the entire interface between them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoders import get_encoder
from .errors import UsageError

log = logging.getLogger("embed_bridge")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".webp")


@dataclass(frozen=True)
class ExtractionJob:
    image_root: Path
    output_path: Path
    encoder: str = "clip"
    batch_size: int = 16
    max_samples: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "image_root", Path(self.image_root))
        object.__setattr__(self, "output_path", Path(self.output_path))
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_samples is not None and self.max_samples < 1:
            raise UsageError(f"max_samples must be >= 1, got {self.max_samples}")


def discover_images(root: Path) -> list[Path]:
    """All image files under root, ordered by sorted path string."""
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    found = [
        p
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    ]
    return sorted(found, key=lambda p: p.as_posix())


def _encode_folder(job: ExtractionJob) -> tuple[np.ndarray, str]:
    encoder = get_encoder(job.encoder)
    paths = discover_images(job.image_root)
    loaded: list[Image.Image] = []
    for path in paths:
        if job.max_samples is not None and len(loaded) >= job.max_samples:
            break
        try:
            with Image.open(path) as img:
                loaded.append(img.convert("RGB"))
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
    if not loaded:
        raise UsageError(f"no usable images under {job.image_root}")
    chunks = [
        encoder.encode_batch(loaded[i : i + job.batch_size])
        for i in range(0, len(loaded), job.batch_size)
    ]
    return np.vstack(chunks), encoder.identity


def _write_rows(path: Path, rows: np.ndarray, comments: list[str]) -> None:
    lines = [f"# {c}" for c in comments]
    lines.append(f"{rows.shape[1]} {rows.shape[0]}")
    for row in rows:
        lines.append(" ".join(repr(float(v)) for v in row))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def extract(job: ExtractionJob) -> Path:
    """Encode every usable image and write one row per image."""
    rows, identity = _encode_folder(job)
    _write_rows(job.output_path, rows, [f"encoder: {identity}"])
    return job.output_path


def export_centroid_only(job: ExtractionJob) -> Path:
    """Encode the folder but ship only the mean embedding (one row)."""
    rows, identity = _encode_folder(job)
    centroid = rows.mean(axis=0, keepdims=True)
    _write_rows(
        job.output_path,
        centroid,
        [f"encoder: {identity}", f"centroid of {rows.shape[0]} samples"],
    )
    return job.output_path

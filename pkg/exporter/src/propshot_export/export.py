"""Embedding export: class-labeled image folders -> bundle files.

Class ids follow the sorted order of the class folder names. Per class, the
first `shots` images (sorted by filename) become the support split and the
rest queries. Prompts average the encoder's text embeddings over every
template before renormalizing.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoders import get_encoder
from .errors import ImageDecodeError
from .formats import ManifestWriter

log = logging.getLogger("propshot_export")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}
DEFAULT_TEMPLATES = ["a photo of a {}."]


@dataclass
class ExportJob:
    dataset_root: Path
    encoder_id: str
    out_dir: Path
    shots: int
    templates: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    device: str = "cpu"
    batch_size: int = 32
    m_props: int = 3
    seed: int = 0


def discover_classes(root: Path) -> list[tuple[str, list[Path]]]:
    """(class name, sorted image paths) in sorted folder order."""
    root = Path(root)
    classes = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        images = sorted(p for p in folder.iterdir()
                        if p.suffix.lower() in IMAGE_SUFFIXES)
        classes.append((folder.name, images))
    if not classes:
        raise ValueError(f"no class folders under {root}")
    return classes


def _decode(path: Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc


def export_embeddings(job: ExportJob) -> Path:
    """Write manifest + tensors for the dataset; returns the manifest path.

    Undecodable images are skipped with a log line; a class left with fewer
    than `shots` usable images aborts the export.
    """
    if job.shots < 1:
        raise ValueError(f"shots must be >= 1, got {job.shots}")
    if not job.templates:
        raise ValueError("need at least one prompt template")
    if job.batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {job.batch_size}")
    encoder = get_encoder(job.encoder_id, device=job.device)
    classes = discover_classes(Path(job.dataset_root))

    tokens, patches, labels = [], [], []
    support, query = [], []
    skipped = 0
    for class_id, (name, paths) in enumerate(classes):
        usable = []
        for path in paths:
            try:
                usable.append(_decode(path))
            except ImageDecodeError as exc:
                skipped += 1
                log.warning("skipping %s", exc)
                print(f"warning: skipping {exc}", file=sys.stderr)
        if len(usable) < job.shots:
            raise ImageDecodeError(
                f"class {name!r} has {len(usable)} usable images, "
                f"needs at least shots={job.shots}")
        for rank, image in enumerate(usable):
            token, patch = encoder.encode_image(image)
            index = len(tokens)
            tokens.append(token)
            patches.append(patch)
            labels.append(float(class_id))
            (support if rank < job.shots else query).append(float(index))

    prompts = []
    for name, _ in classes:
        display = name.replace("_", " ")
        texts = [t.format(display) for t in job.templates]
        pieces = [encoder.encode_texts(texts[i:i + job.batch_size])
                  for i in range(0, len(texts), job.batch_size)]
        mean = np.concatenate(pieces, axis=0).mean(axis=0)
        prompts.append(mean / np.linalg.norm(mean))

    writer = ManifestWriter(job.out_dir, dim=encoder.dim, n_classes=len(classes),
                            shots=job.shots, m_props=job.m_props, seed=job.seed)
    writer.put("class_tokens", np.stack(tokens))
    writer.put("patches", np.stack(patches))
    writer.put("labels", np.array(labels))
    writer.put("class_prompts", np.stack(prompts))
    writer.put("support_idx", np.array(support))
    writer.put("query_idx", np.array(query))
    manifest = writer.write()
    log.info("exported %d classes, %d images (%d skipped) -> %s",
             len(classes), len(tokens), skipped, manifest)
    return manifest

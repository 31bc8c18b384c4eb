"""Annotated images: manifest parsing, letterboxing and batching.

Manifest records are one box per line:

    path,class_id,x_min,y_min,x_max,y_max

with `path` relative to the manifest. Several records may name the same
image; images keep the order in which they first appear.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from metrics import Box, GroundTruth

logger = logging.getLogger(__name__)

PAD_VALUE = 128
MANIFEST_HEADER = "# path,class_id,x_min,y_min,x_max,y_max"


class ManifestError(ValueError):
    """A manifest record is malformed or points at something invalid."""


@dataclass(frozen=True)
class Letterbox:
    """Aspect-preserving resize to size x size, padding centered."""
    scale: float
    pad_x: int
    pad_y: int
    size: int

    @classmethod
    def fit(cls, width: int, height: int, size: int) -> "Letterbox":
        scale = min(size / width, size / height)
        new_w, new_h = max(1, round(width * scale)), max(1, round(height * scale))
        return cls(scale, (size - new_w) // 2, (size - new_h) // 2, size)

    def apply(self, box: Sequence[float]) -> Box:
        x0, y0, x1, y1 = box
        s = self.scale
        return (x0 * s + self.pad_x, y0 * s + self.pad_y, x1 * s + self.pad_x, y1 * s + self.pad_y)

    def invert(self, box: Sequence[float]) -> Box:
        x0, y0, x1, y1 = box
        s = self.scale
        return ((x0 - self.pad_x) / s, (y0 - self.pad_y) / s, (x1 - self.pad_x) / s, (y1 - self.pad_y) / s)

    def resize(self, image: Image.Image) -> np.ndarray:
        new_w, new_h = max(1, round(image.width * self.scale)), max(1, round(image.height * self.scale))
        canvas = Image.new("RGB", (self.size, self.size), (PAD_VALUE,) * 3)
        canvas.paste(image.convert("RGB").resize((new_w, new_h), Image.BILINEAR), (self.pad_x, self.pad_y))
        return np.asarray(canvas, dtype=np.uint8)


@dataclass
class AnnotatedImage:
    path: str
    width: int
    height: int
    ground_truths: List[GroundTruth] = field(default_factory=list)  # original pixels
    raster: Optional[np.ndarray] = None  # letterboxed (size, size, 3) uint8
    letterbox: Optional[Letterbox] = None

    @property
    def input_truths(self) -> List[GroundTruth]:
        """Ground truth in network-input pixels."""
        if self.letterbox is None:
            return list(self.ground_truths)
        return [GroundTruth(gt.class_id, self.letterbox.apply(gt.box)) for gt in self.ground_truths]


def load_raster(path: str, size: int) -> Tuple[np.ndarray, Letterbox, Tuple[int, int]]:
    """Letterboxed raster, its transform and the original (width, height)."""
    with Image.open(path) as image:
        image.load()
        lb = Letterbox.fit(image.width, image.height, size)
        return lb.resize(image), lb, (image.width, image.height)


def _parse_record(fields_: List[str], where: str, class_count: int):
    if len(fields_) != 6:
        raise ManifestError(f"{where}: expected 6 comma-separated fields, got {len(fields_)}")
    rel = fields_[0].strip()
    try:
        class_id = int(fields_[1])
        box = tuple(float(v) for v in fields_[2:])
    except ValueError as exc:
        raise ManifestError(f"{where}: malformed number ({exc})") from exc
    if not 0 <= class_id < class_count:
        raise ManifestError(f"{where}: class id {class_id} outside [0, {class_count})")
    if not (box[0] < box[2] and box[1] < box[3]):
        raise ManifestError(f"{where}: degenerate box {box}")
    return rel, class_id, box


def load_dataset(manifest_path: str, input_size: int = 320, class_count: int = 7,
                 load_images: bool = True) -> List[AnnotatedImage]:
    root = os.path.dirname(os.path.abspath(manifest_path))
    images: Dict[str, AnnotatedImage] = {}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            where = f"{manifest_path}:{lineno}"
            rel, class_id, box = _parse_record(line.split(","), where, class_count)
            path = os.path.join(root, rel)
            record = images.get(path)
            if record is None:
                if not os.path.isfile(path):
                    raise ManifestError(f"{where}: image file not found: {rel}")
                try:
                    with Image.open(path) as image:
                        width, height = image.size
                except OSError as exc:
                    raise ManifestError(f"{where}: unreadable image {rel}: {exc}") from exc
                record = images[path] = AnnotatedImage(path=path, width=width, height=height)
            if box[0] < 0 or box[1] < 0 or box[2] > record.width or box[3] > record.height:
                raise ManifestError(f"{where}: box {box} outside the {record.width}x{record.height} image")
            record.ground_truths.append(GroundTruth(class_id, box))
    records = list(images.values())
    if load_images:
        for record in records:
            record.raster, record.letterbox, _ = load_raster(record.path, input_size)
    logger.info("loaded %d images (%d boxes) from %s", len(records),
                sum(len(r.ground_truths) for r in records), manifest_path)
    return records


def to_batch(records: Sequence[AnnotatedImage]) -> Tuple[np.ndarray, List[List[GroundTruth]]]:
    """(B, 3, S, S) float32 in [0, 1] plus input-space ground truth."""
    if any(r.raster is None for r in records):
        raise ValueError("to_batch needs records loaded with their rasters")
    images = np.stack([r.raster for r in records]).astype(np.float32) / 255.0
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2)), [r.input_truths for r in records]

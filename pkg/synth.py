"""Procedural face corpus with one labelled face per image.

Each class draws the same cartoon face with its own mouth curve, mouth
opening, brow tilt and eye aperture. Image `i` uses the generator seeded with
(seed, i) and class `i % class_count`, so a SynthSpec fully determines the
bytes on disk.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from dataset import MANIFEST_HEADER
from metrics import CLASS_NAMES, GroundTruth

logger = logging.getLogger(__name__)

SPLIT_SALT = 7919
VAL_FRACTION = 0.2


@dataclass(frozen=True)
class FaceGeometry:
    mouth_curve: float   # > 0 smiles, < 0 frowns; fraction of mouth width
    mouth_open: float    # lip gap as a fraction of mouth width
    brow_angle: float    # degrees; > 0 drops the inner ends
    eye_aperture: float  # eye height over eye width


# Anger, Disgust, Fear, Happy, Neutral, Sad, Surprise
DEFAULT_GEOMETRY: Tuple[FaceGeometry, ...] = (
    FaceGeometry(mouth_curve=-0.15, mouth_open=0.0, brow_angle=28.0, eye_aperture=0.35),
    FaceGeometry(mouth_curve=-0.30, mouth_open=0.12, brow_angle=12.0, eye_aperture=0.15),
    FaceGeometry(mouth_curve=-0.10, mouth_open=0.35, brow_angle=-22.0, eye_aperture=0.95),
    FaceGeometry(mouth_curve=0.40, mouth_open=0.10, brow_angle=0.0, eye_aperture=0.55),
    FaceGeometry(mouth_curve=0.0, mouth_open=0.0, brow_angle=0.0, eye_aperture=0.55),
    FaceGeometry(mouth_curve=-0.40, mouth_open=0.0, brow_angle=-28.0, eye_aperture=0.40),
    FaceGeometry(mouth_curve=0.0, mouth_open=0.60, brow_angle=-8.0, eye_aperture=1.0),
)


@dataclass
class SynthSpec:
    image_size: int = 160
    class_count: int = 7
    geometry: Sequence[FaceGeometry] = field(default_factory=lambda: DEFAULT_GEOMETRY)
    noise: float = 0.08        # background noise std, fraction of full scale
    jitter: float = 0.15       # center offset, fraction of the free margin
    face_scale: Tuple[float, float] = (0.35, 0.75)  # face height over image size
    seed: int = 0
    count: int = 700

    def __post_init__(self):
        if self.class_count < 1 or self.class_count > len(self.geometry):
            raise ValueError(f"class_count must lie in [1, {len(self.geometry)}], got {self.class_count}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")
        lo, hi = self.face_scale
        if not 0 < lo <= hi <= 0.95:
            raise ValueError(f"face_scale must satisfy 0 < lo <= hi <= 0.95, got {self.face_scale}")


@dataclass
class SynthSample:
    file_name: str
    truth: GroundTruth


def _brow(draw: ImageDraw.ImageDraw, cx: float, cy: float, half: float, angle: float, inner_sign: int, width: int):
    # inner end sits toward the nose; positive angle pulls it down
    drop = math.tan(math.radians(angle)) * half
    inner = (cx + inner_sign * half, cy + drop)
    outer = (cx - inner_sign * half, cy - drop)
    draw.line([outer, inner], fill=(40, 25, 15), width=width)


def _mouth(draw: ImageDraw.ImageDraw, cx: float, cy: float, half: float, geo: FaceGeometry, width: int):
    xs = np.linspace(-1.0, 1.0, 25)
    # corners rise for a smile: y is lowest at the corners
    bend = geo.mouth_curve * 2 * half * (1 - xs ** 2) - geo.mouth_curve * half
    upper = [(cx + x * half, cy + b) for x, b in zip(xs, bend)]
    gap = geo.mouth_open * 2 * half * (1 - xs ** 2)
    if geo.mouth_open > 0:
        lower = [(cx + x * half, cy + b + g) for x, b, g in zip(xs, bend, gap)]
        draw.polygon(upper + lower[::-1], fill=(90, 20, 30), outline=(60, 10, 20))
    else:
        draw.line(upper, fill=(90, 20, 30), width=width)


def render_face(spec: SynthSpec, index: int) -> Tuple[Image.Image, GroundTruth]:
    rng = np.random.default_rng([spec.seed, index])
    class_id = index % spec.class_count
    geo = spec.geometry[class_id]
    size = spec.image_size

    background = rng.uniform(60, 200, size=3)
    pixels = background + rng.normal(0.0, spec.noise * 255, size=(size, size, 3))
    image = Image.fromarray(np.clip(np.rint(pixels), 0, 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(image)

    face_h = int(round(rng.uniform(*spec.face_scale) * size))
    face_w = int(round(face_h * rng.uniform(0.72, 0.85)))
    free_x, free_y = size - face_w - 2, size - face_h - 2
    x0 = int(round(free_x / 2 + rng.uniform(-1, 1) * spec.jitter * free_x)) + 1
    y0 = int(round(free_y / 2 + rng.uniform(-1, 1) * spec.jitter * free_y)) + 1
    x1, y1 = x0 + face_w - 1, y0 + face_h - 1
    skin = tuple(int(v) for v in rng.integers([200, 160, 130], [240, 200, 170]))
    draw.ellipse([x0, y0, x1, y1], fill=skin, outline=(120, 80, 60))

    cx = (x0 + x1) / 2
    line = max(1, face_h // 40)
    eye_y = y0 + 0.40 * face_h
    eye_dx, eye_w = 0.21 * face_w, 0.09 * face_w
    eye_h = max(1.0, eye_w * geo.eye_aperture)
    for sign in (-1, 1):
        ex = cx + sign * eye_dx
        draw.ellipse([ex - eye_w, eye_y - eye_h, ex + eye_w, eye_y + eye_h], fill=(250, 250, 250), outline=(30, 30, 30))
        pupil = min(eye_w, eye_h) * 0.6
        draw.ellipse([ex - pupil, eye_y - pupil, ex + pupil, eye_y + pupil], fill=(20, 20, 20))
        _brow(draw, ex, eye_y - 0.12 * face_h, 1.2 * eye_w, geo.brow_angle, -sign, line + 1)
    nose_y = y0 + 0.58 * face_h
    draw.line([(cx, eye_y + eye_h), (cx - 0.03 * face_w, nose_y), (cx + 0.02 * face_w, nose_y)],
              fill=(150, 100, 80), width=line)
    _mouth(draw, cx, y0 + 0.74 * face_h, 0.22 * face_w, geo, line + 1)

    return image, GroundTruth(class_id, (float(x0), float(y0), float(x1 + 1), float(y1 + 1)))


def split_indices(classes: Sequence[int], seed: int, val_fraction: float = VAL_FRACTION) -> Tuple[List[int], List[int]]:
    """Seeded per-class split; both lists come back in index order."""
    rng = np.random.default_rng([seed, SPLIT_SALT])
    by_class: Dict[int, List[int]] = {}
    for i, k in enumerate(classes):
        by_class.setdefault(k, []).append(i)
    train, val = [], []
    for k in sorted(by_class):
        members = np.asarray(by_class[k])
        members = members[rng.permutation(members.size)]
        n_val = int(members.size * val_fraction)
        val.extend(members[:n_val].tolist())
        train.extend(members[n_val:].tolist())
    return sorted(train), sorted(val)


def _write_manifest(path: str, samples: Sequence[SynthSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for s in samples:
            x0, y0, x1, y1 = (int(v) for v in s.truth.box)
            fh.write(f"{s.file_name},{s.truth.class_id},{x0},{y0},{x1},{y1}\n")


def gen_synth(spec: SynthSpec, out_dir: str) -> List[SynthSample]:
    """Write images, `manifest.csv` and the `train.csv` / `val.csv` split."""
    os.makedirs(out_dir, exist_ok=True)
    samples = []
    for i in range(spec.count):
        image, truth = render_face(spec, i)
        name = f"img_{i:05d}.png"
        image.save(os.path.join(out_dir, name), format="PNG")
        samples.append(SynthSample(name, truth))
    _write_manifest(os.path.join(out_dir, "manifest.csv"), samples)
    train, val = split_indices([s.truth.class_id for s in samples], spec.seed)
    _write_manifest(os.path.join(out_dir, "train.csv"), [samples[i] for i in train])
    _write_manifest(os.path.join(out_dir, "val.csv"), [samples[i] for i in val])
    counts = np.bincount([s.truth.class_id for s in samples], minlength=spec.class_count)
    logger.info("wrote %d images to %s (%s); split %d train / %d val", spec.count, out_dir,
                ", ".join(f"{CLASS_NAMES[k] if k < len(CLASS_NAMES) else k}={n}" for k, n in enumerate(counts)),
                len(train), len(val))
    return samples

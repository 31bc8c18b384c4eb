"""Checkpoints, batch evaluation and single-image detection with heatmaps.

A checkpoint is two files: `<path>` holds every parameter as a serialized
tensor in definition order, `<path>.manifest` holds the config and the
parameter table:

    [config]
    input_size = 160
    ...
    [params]
    backbone.stem.conv.weight 8,3,3,3
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw
from scipy.special import expit

import numerics as nx
from config import ConfigError, TrainConfig, build_configs, dump_config, parse_pairs
from dataset import AnnotatedImage, Letterbox, load_dataset
from metrics import CLASS_NAMES, Detection, EvalReport, evaluate_detections, format_report
from network import Detector, LevelOutput, NetConfig, decode_batch
from numerics import Tensor

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest"
HEATMAP_ALPHA = 0.45


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt, or inconsistent with its config."""


@dataclass
class Checkpoint:
    model: Detector
    train: TrainConfig
    net: NetConfig


# =========================
# Checkpoints
# =========================
def save_checkpoint(path: str, model: Detector, train: Optional[TrainConfig] = None) -> None:
    params = list(model.named_parameters())
    with open(path, "wb") as fh:
        for _, p in params:
            nx.write_tensor(fh, p.data)
    lines = ["[config]"] + dump_config(train or TrainConfig(), model.config) + ["[params]"]
    lines += [f"{name} {','.join(str(n) for n in p.shape)}" for name, p in params]
    with open(path + MANIFEST_SUFFIX, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    logger.info("checkpoint written: %s (%d tensors)", path, len(params))


def _manifest_sections(text: str) -> Dict[str, List[str]]:
    sections: Dict[str, List[str]] = {}
    current = None
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = sections.setdefault(stripped[1:-1], [])
        elif current is not None:
            current.append(line)
    return sections


def load_checkpoint(path: str) -> Checkpoint:
    manifest = path + MANIFEST_SUFFIX
    if not os.path.isfile(path) or not os.path.isfile(manifest):
        raise CheckpointError(f"checkpoint not found: {path} (needs {os.path.basename(manifest)} too)")
    with open(manifest, "r", encoding="utf-8") as fh:
        sections = _manifest_sections(fh.read())
    if "config" not in sections or "params" not in sections:
        raise CheckpointError(f"{manifest}: needs [config] and [params] sections")
    try:
        train, net = build_configs(parse_pairs(sections["config"], source=manifest), source=manifest)
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from exc

    model = Detector(net)
    expected = [(name, p.shape) for name, p in model.named_parameters()]
    listed = []
    for line in sections["params"]:
        if not line.strip():
            continue
        name, _, dims = line.strip().partition(" ")
        listed.append((name, tuple(int(n) for n in dims.split(",") if n)))
    if listed != expected:
        mismatched = next((i for i, (a, b) in enumerate(zip(listed, expected)) if a != b), min(len(listed), len(expected)))
        raise CheckpointError(f"{manifest}: parameter table does not match the configured network "
                              f"({len(listed)} listed, {len(expected)} expected; first difference at entry {mismatched})")
    state = {}
    try:
        with open(path, "rb") as fh:
            for name, shape in expected:
                value = nx.read_tensor(fh)
                if value.shape != shape:
                    raise CheckpointError(f"{path}: {name} stored as {value.shape}, expected {shape}")
                state[name] = value
            if fh.read(1):
                raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint: {exc}") from exc
    model.load_state_dict(state)
    return Checkpoint(model=model, train=train, net=net)


# =========================
# Evaluation
# =========================
def predict(model: Detector, images: np.ndarray, conf_threshold: float, batch_size: int = 8) -> List[List[Detection]]:
    """Detections in network-input pixels for a (B, 3, S, S) batch."""
    config = model.config
    results: List[List[Detection]] = []
    with nx.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outputs = model(Tensor(images[start:start + batch_size]))
            results.extend(decode_batch(outputs, conf_threshold, config.nms_iou, config.input_size))
    return results


def evaluate(model: Detector, records: Sequence[AnnotatedImage], eval_conf: float = 0.001,
             batch_size: int = 8, title: str = "") -> EvalReport:
    """Runs the detector over `records` and scores it against their ground truth."""
    config = model.config
    for record in records:
        if record.raster is None or record.raster.shape[:2] != (config.input_size, config.input_size):
            shape = None if record.raster is None else record.raster.shape[:2]
            raise CheckpointError(f"{record.path}: raster {shape} does not match the network input {config.input_size}")
    predictions: List[List[Detection]] = []
    truths = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        images = np.stack([r.raster for r in chunk]).astype(np.float32).transpose(0, 3, 1, 2) / 255.0
        predictions.extend(predict(model, np.ascontiguousarray(images), eval_conf, batch_size))
        truths.extend(r.input_truths for r in chunk)
    report = evaluate_detections(predictions, truths, config.class_count, iou_threshold=0.5,
                                 conf_threshold=config.conf_threshold, class_names=_class_names(config))
    report.title = title
    logger.info("evaluated %d images: mAP %.4f", len(records), report.map)
    return report


def _class_names(config: NetConfig) -> List[str]:
    return [CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class{k}" for k in range(config.class_count)]


# =========================
# Detection + heatmap
# =========================
@dataclass
class DetectResult:
    detections: List[Detection]        # original-image pixels
    input_detections: List[Detection]  # network-input pixels
    heatmap: np.ndarray                # (S, S) in [0, 1]
    raster: np.ndarray                 # letterboxed input, (S, S, 3) uint8
    letterbox: Letterbox
    class_names: List[str]

    def lines(self) -> List[str]:
        return [format_detection(d, self.class_names) for d in self.detections]


def format_detection(det: Detection, class_names: Sequence[str] = CLASS_NAMES) -> str:
    x0, y0, x1, y1 = det.box
    return f"{class_names[det.class_id]} {det.score:.2f} ({x0:.1f}, {y0:.1f}, {x1:.1f}, {y1:.1f})"


def heatmap_matrix(outputs: Sequence[LevelOutput], size: int, index: int = 0) -> np.ndarray:
    """Per-class sigmoid(obj) * sigmoid(cls), max over classes and levels, min-max normalized."""
    fused = None
    for level in outputs:
        obj = expit(level.obj.data[index, 0].astype(np.float64))
        cls = expit(level.cls.data[index].astype(np.float64))
        score = (obj[None] * cls).max(axis=0).astype(np.float32)
        up = np.asarray(Image.fromarray(score).resize((size, size), Image.BILINEAR), dtype=np.float64)
        fused = up if fused is None else np.maximum(fused, up)
    lo, hi = float(fused.min()), float(fused.max())
    if hi - lo <= 1e-6:
        logger.warning("heatmap is constant (%.6g); writing a flat 0.5 field", lo)
        return np.full((size, size), 0.5)
    return (fused - lo) / (hi - lo)


def _invert(det: Detection, letterbox: Letterbox, width: int, height: int) -> Detection:
    x0, y0, x1, y1 = letterbox.invert(det.box)
    box = (min(max(x0, 0.0), width), min(max(y0, 0.0), height), min(max(x1, 0.0), width), min(max(y1, 0.0), height))
    return Detection(det.class_id, det.score, box)


def detect_image(model: Detector, image: Image.Image, conf: float = 0.5) -> DetectResult:
    config = model.config
    letterbox = Letterbox.fit(image.width, image.height, config.input_size)
    raster = letterbox.resize(image)
    batch = np.ascontiguousarray(raster.astype(np.float32).transpose(2, 0, 1)[None] / 255.0)
    with nx.no_grad():
        outputs = model(Tensor(batch))
    found = decode_batch(outputs, conf, config.nms_iou, config.input_size)[0]
    return DetectResult(
        detections=[_invert(d, letterbox, image.width, image.height) for d in found],
        input_detections=found,
        heatmap=heatmap_matrix(outputs, config.input_size),
        raster=raster,
        letterbox=letterbox,
        class_names=_class_names(config),
    )


def detect(model: Detector, image_path: str, conf: float = 0.5, heatmap_dir: Optional[str] = None) -> DetectResult:
    with Image.open(image_path) as image:
        image.load()
        result = detect_image(model, image, conf)
    if heatmap_dir:
        write_heatmap(heatmap_dir, result)
    return result


def heatmap_overlay(result: DetectResult, alpha: float = HEATMAP_ALPHA) -> Image.Image:
    """jet-coloured heatmap over the letterboxed input, with labelled boxes."""
    colour = colormaps["jet"](result.heatmap)[..., :3] * 255.0
    blended = (1 - alpha) * result.raster.astype(np.float64) + alpha * colour
    image = Image.fromarray(np.clip(np.rint(blended), 0, 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(image)
    for det in result.input_detections:
        x0, y0, x1, y1 = det.box
        draw.rectangle([x0, y0, x1, y1], outline=(255, 255, 255), width=2)
        draw.text((x0 + 2, max(0.0, y0 - 12)), f"{result.class_names[det.class_id]} {det.score:.2f}",
                  fill=(255, 255, 255))
    return image


def write_heatmap(out_dir: str, result: DetectResult) -> Tuple[str, str, str]:
    os.makedirs(out_dir, exist_ok=True)
    gray = os.path.join(out_dir, "heatmap.png")
    matrix = os.path.join(out_dir, "heatmap.csv")
    colour = os.path.join(out_dir, "heatmap_color.png")
    Image.fromarray(np.rint(result.heatmap * 255).astype(np.uint8), "L").save(gray)
    np.savetxt(matrix, result.heatmap, delimiter=",", fmt="%.6f")
    heatmap_overlay(result).save(colour)
    logger.info("heatmap written to %s", out_dir)
    return gray, matrix, colour


def load_eval_records(data_dir: str, net: NetConfig) -> List[AnnotatedImage]:
    """`val.csv` when the directory has one, else `manifest.csv`."""
    val = os.path.join(data_dir, "val.csv")
    path = val if os.path.isfile(val) else os.path.join(data_dir, "manifest.csv")
    return load_dataset(path, net.input_size, net.class_count)


def print_report(report: EvalReport) -> str:
    text = format_report(report)
    print(text)
    return text

"""Detector assembly: CSP backbone, PAN-style fusion, decoupled anchor-free head.

At the reference size (320 input, width 1.0) the backbone emits 40x40x128,
20x20x256 and 10x10x512 maps at strides 8, 16 and 32.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

import numerics as nx
from blocks import VssModule, VssVariant
from layers import Conv2d, CostMeter, Module
from metrics import Box, Detection, iou_matrix
from numerics import Tensor
from oss2d import ALL_DIRECTIONS, Direction
from ssm import DEFAULT_CHUNK

logger = logging.getLogger(__name__)

STRIDES = (8, 16, 32)
PRIOR_PROB = 0.01
MAX_LOG_SIZE = 8.0
REFERENCE_PARAMS = 8.68e6
REFERENCE_FLOPS = 6.89e9


@dataclass
class NetConfig:
    input_size: int = 320
    widths: Tuple[int, ...] = (32, 64, 128, 256, 512)
    width_mult: float = 1.0
    depths: Tuple[int, ...] = (1, 2, 2, 1)
    vss_backbone: bool = True
    vss_fpn: bool = True
    directions: Tuple[Direction, ...] = ALL_DIRECTIONS
    class_count: int = 7
    head_width: int = 128
    d_state: int = 16
    scan_kernel: str = "parallel"
    scan_chunk: int = DEFAULT_CHUNK
    iou_weight: float = 1.0
    obj_weight: float = 1.0
    cls_weight: float = 1.0
    conf_threshold: float = 0.5
    nms_iou: float = 0.5
    assign_size_factor: float = 4.0
    init_seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.depths = tuple(int(d) for d in self.depths)
        self.directions = tuple(Direction(d) for d in self.directions)
        if self.input_size < 32 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.class_count < 1:
            raise ValueError(f"class_count must be >= 1, got {self.class_count}")
        if len(self.widths) != 5 or len(self.depths) != 4:
            raise ValueError("widths needs 5 entries (stem + 4 stages) and depths 4")
        if self.width_mult <= 0:
            raise ValueError(f"width_mult must be positive, got {self.width_mult}")
        if not self.directions:
            raise ValueError("at least one scan direction is required")
        if self.scan_kernel not in ("sequential", "parallel"):
            raise ValueError(f"scan_kernel must be 'sequential' or 'parallel', got {self.scan_kernel!r}")
        for name in ("conf_threshold", "nms_iou"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def scaled(self, width: int) -> int:
        return max(8, int(round(width * self.width_mult / 8)) * 8)

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(self.scaled(w) for w in self.widths)

    @property
    def pyramid_channels(self) -> Tuple[int, int, int]:
        return self.channels[2], self.channels[3], self.channels[4]

    @property
    def head_channels(self) -> int:
        return self.scaled(self.head_width)

    def vss(self, channels: int, variant: VssVariant, rng: np.random.Generator) -> VssModule:
        return VssModule(channels, variant, self.d_state, self.directions, rng=rng,
                         kernel=self.scan_kernel, chunk=self.scan_chunk)

    def as_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# =========================
# Building blocks
# =========================
class ConvAct(Module):
    """Conv + SiLU."""

    def __init__(self, cin: int, cout: int, kernel: int = 1, stride: int = 1, rng=None):
        self.conv = Conv2d(cin, cout, kernel, stride, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return nx.silu(self.conv(x))


class Bottleneck(Module):
    def __init__(self, channels: int, rng=None):
        self.cv1 = ConvAct(channels, channels, 1, rng=rng)
        self.cv2 = ConvAct(channels, channels, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return nx.add(x, self.cv2(self.cv1(x)))


class CSPBlock(Module):
    """Split into a bottleneck path and a bypass, then merge with a 1x1 conv."""

    def __init__(self, channels: int, depth: int, rng=None):
        half = channels // 2
        self.main = ConvAct(channels, half, 1, rng=rng)
        self.bypass = ConvAct(channels, half, 1, rng=rng)
        self.blocks = [Bottleneck(half, rng=rng) for _ in range(depth)]
        self.merge = ConvAct(2 * half, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.main(x)
        for block in self.blocks:
            y = block(y)
        return self.merge(nx.concat([y, self.bypass(x)], axis=1))


class SPPF(Module):
    """Three chained 5x5 max pools concatenated with their input."""

    def __init__(self, channels: int, rng=None):
        half = channels // 2
        self.reduce = ConvAct(channels, half, 1, rng=rng)
        self.expand = ConvAct(4 * half, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y0 = self.reduce(x)
        y1 = nx.max_pool(y0, 5, 1, 2)
        y2 = nx.max_pool(y1, 5, 1, 2)
        y3 = nx.max_pool(y2, 5, 1, 2)
        return self.expand(nx.concat([y0, y1, y2, y3], axis=1))


@dataclass
class PyramidFeatures:
    p3: Tensor
    p4: Tensor
    p5: Tensor

    def levels(self) -> List[Tensor]:
        return [self.p3, self.p4, self.p5]

    def shapes(self) -> List[Tuple[int, ...]]:
        return [t.shape for t in self.levels()]


# =========================
# Backbone
# =========================
class Backbone(Module):
    def __init__(self, config: NetConfig, rng: np.random.Generator):
        c = config.channels
        self.stem = ConvAct(3, c[0], 3, 2, rng=rng)
        self.downs = [ConvAct(c[i], c[i + 1], 3, 2, rng=rng) for i in range(4)]
        self.csps = [CSPBlock(c[i + 1], config.depths[i], rng=rng) for i in range(4)]
        self.sppf = SPPF(c[4], rng=rng)
        self.vss = [config.vss(ch, VssVariant.VSS2, rng) for ch in c[2:]] if config.vss_backbone else []

    def forward(self, image: Tensor) -> PyramidFeatures:
        return backbone_forward(image, self)


def backbone_forward(image: Tensor, backbone: Backbone) -> PyramidFeatures:
    if image.ndim != 4 or image.shape[1] != 3:
        raise nx.ShapeError(f"backbone: expected (B, 3, H, W), got {image.shape}")
    H, W = image.shape[2:]
    if H % 32 or W % 32:
        raise nx.ShapeError(f"backbone: spatial size {H}x{W} is not divisible by 32")
    x = backbone.stem(image)
    outs = []
    for i in range(4):
        x = backbone.csps[i](backbone.downs[i](x))
        if i == 3:
            x = backbone.sppf(x)
        if i >= 1:
            outs.append(x)
    if backbone.vss:
        outs = [vss(t) for vss, t in zip(backbone.vss, outs)]
    return PyramidFeatures(*outs)


# =========================
# FPN
# =========================
class Fpn(Module):
    def __init__(self, config: NetConfig, rng: np.random.Generator):
        c3, c4, c5 = config.pyramid_channels
        self.channels = (c3, c4, c5)
        self.lat5 = ConvAct(c5, c4, 1, rng=rng)
        self.lat4 = ConvAct(c4, c3, 1, rng=rng)
        if config.vss_fpn:
            self.td4 = config.vss(2 * c4, VssVariant.VSS1, rng)
            self.td3 = config.vss(2 * c3, VssVariant.VSS1, rng)
        else:
            self.td4 = ConvAct(2 * c4, c4, 1, rng=rng)
            self.td3 = ConvAct(2 * c3, c3, 1, rng=rng)
        self.down3 = ConvAct(c3, c3, 3, 2, rng=rng)
        self.down4 = ConvAct(c4, c4, 3, 2, rng=rng)
        self.bu4 = ConvAct(2 * c3, c4, 1, rng=rng)
        self.bu5 = ConvAct(2 * c4, c5, 1, rng=rng)
        self.refine = [config.vss(c4, VssVariant.VSS2, rng), config.vss(c5, VssVariant.VSS2, rng)] if config.vss_fpn else []

    def forward(self, feats: PyramidFeatures) -> PyramidFeatures:
        return fpn_forward(feats, self)


def fpn_forward(feats: PyramidFeatures, fpn: Fpn) -> PyramidFeatures:
    shapes = feats.shapes()
    for level, (shape, ch) in enumerate(zip(shapes, fpn.channels)):
        if len(shape) != 4 or shape[1] != ch:
            raise nx.ShapeError(f"fpn: level {level} has shape {shape}, expected {ch} channels")
    if shapes[0][2] != 2 * shapes[1][2] or shapes[1][2] != 2 * shapes[2][2]:
        raise nx.ShapeError(f"fpn: pyramid sizes {[s[2:] for s in shapes]} are not in ratio 4:2:1")
    lat5 = fpn.lat5(feats.p5)
    td4 = fpn.td4(nx.concat([nx.nearest_upsample(lat5), feats.p4], axis=1))
    lat4 = fpn.lat4(td4)
    out3 = fpn.td3(nx.concat([nx.nearest_upsample(lat4), feats.p3], axis=1))
    out4 = fpn.bu4(nx.concat([fpn.down3(out3), lat4], axis=1))
    out5 = fpn.bu5(nx.concat([fpn.down4(out4), lat5], axis=1))
    if fpn.refine:
        out4, out5 = fpn.refine[0](out4), fpn.refine[1](out5)
    return PyramidFeatures(out3, out4, out5)


# =========================
# Head
# =========================
@dataclass
class LevelOutput:
    cls: Tensor  # [B, classes, H, W] logits
    box: Tensor  # [B, 4, H, W]: dx, dy, log w, log h in stride units
    obj: Tensor  # [B, 1, H, W] logits
    stride: int


class HeadLevel(Module):
    """Shared 1x1 stem, then separate classification and regression stacks."""

    def __init__(self, cin: int, width: int, class_count: int, rng=None):
        self.stem = ConvAct(cin, width, 1, rng=rng)
        self.cls_conv = ConvAct(width, width, 3, rng=rng)
        self.cls_pred = Conv2d(width, class_count, 1, rng=rng)
        self.reg_conv = ConvAct(width, width, 3, rng=rng)
        self.box_pred = Conv2d(width, 4, 1, rng=rng)
        self.obj_pred = Conv2d(width, 1, 1, rng=rng)
        prior = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        self.cls_pred.bias.data[:] = prior
        self.obj_pred.bias.data[:] = prior

    def forward(self, x: Tensor, stride: int) -> LevelOutput:
        x = self.stem(x)
        c = self.cls_conv(x)
        r = self.reg_conv(x)
        return LevelOutput(cls=self.cls_pred(c), box=self.box_pred(r), obj=self.obj_pred(r), stride=stride)


class Head(Module):
    def __init__(self, config: NetConfig, rng: np.random.Generator):
        self.levels = [HeadLevel(ch, config.head_channels, config.class_count, rng=rng)
                       for ch in config.pyramid_channels]

    def forward(self, feats: PyramidFeatures) -> List[LevelOutput]:
        return head_forward(feats, self)


def head_forward(feats: PyramidFeatures, head: Head) -> List[LevelOutput]:
    return [level(x, stride) for level, x, stride in zip(head.levels, feats.levels(), STRIDES)]


class Detector(Module):
    def __init__(self, config: NetConfig):
        rng = np.random.default_rng(config.init_seed)
        self.config = config
        self.backbone = Backbone(config, rng)
        self.fpn = Fpn(config, rng)
        self.head = Head(config, rng)

    def forward(self, images: Tensor) -> List[LevelOutput]:
        return self.head(self.fpn(self.backbone(images)))


# =========================
# Decode / NMS / encode
# =========================
def _check_threshold(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float) -> List[int]:
    """Class-wise greedy suppression; returns kept indices by descending score."""
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[(classes[rest] == classes[i]) & ~suppressed[rest]]
        if rest.size:
            overlaps = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            suppressed[rest[overlaps > iou_threshold]] = True
    return keep


def _level_arrays(level, index: int):
    if isinstance(level, LevelOutput):
        return level.cls.data[index], level.box.data[index], level.obj.data[index], level.stride
    return (np.asarray(level["cls"])[index], np.asarray(level["box"])[index],
            np.asarray(level["obj"])[index], level["stride"])


def decode(outputs: Sequence, index: int = 0, conf_threshold: float = 0.5, nms_iou: float = 0.5,
           image_size: Optional[int] = None) -> List[Detection]:
    """Raw maps of one image -> thresholded, NMS-filtered detections, best first.

    center = (grid + offset) * stride, size = exp(log size) * stride,
    score = sigmoid(obj) * sigmoid(best class logit).
    """
    _check_threshold("conf_threshold", conf_threshold)
    _check_threshold("nms_iou", nms_iou)
    all_boxes, all_scores, all_classes = [], [], []
    for level in outputs:
        cls, box, obj, stride = _level_arrays(level, index)
        K, H, W = cls.shape
        size = image_size if image_size is not None else W * stride
        cls_id = cls.argmax(axis=0)
        best = np.take_along_axis(cls, cls_id[None], axis=0)[0]
        with np.errstate(invalid="ignore"):
            score = expit(obj[0].astype(np.float64)) * expit(best.astype(np.float64))
        gy, gx = np.nonzero(score >= conf_threshold)
        if gy.size == 0:
            continue
        dx, dy, lw, lh = (box[ch, gy, gx].astype(np.float64) for ch in range(4))
        cx, cy = (gx + dx) * stride, (gy + dy) * stride
        w = np.exp(np.minimum(lw, MAX_LOG_SIZE)) * stride
        h = np.exp(np.minimum(lh, MAX_LOG_SIZE)) * stride
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        boxes = np.clip(boxes, 0, size)
        valid = (boxes[:, 0] < boxes[:, 2]) & (boxes[:, 1] < boxes[:, 3])
        all_boxes.append(boxes[valid])
        all_scores.append(score[gy, gx][valid])
        all_classes.append(cls_id[gy, gx][valid])
    if not all_boxes:
        return []
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    classes = np.concatenate(all_classes)
    keep = nms(boxes, scores, classes, nms_iou)
    return [Detection(int(classes[i]), float(scores[i]), tuple(float(v) for v in boxes[i])) for i in keep]


def decode_batch(outputs: Sequence[LevelOutput], conf_threshold: float = 0.5, nms_iou: float = 0.5,
                 image_size: Optional[int] = None) -> List[List[Detection]]:
    batch = outputs[0].cls.shape[0]
    return [decode(outputs, b, conf_threshold, nms_iou, image_size) for b in range(batch)]


def encode_box(box: Box, stride: int, grid_size: Optional[int] = None) -> Tuple[int, int, np.ndarray]:
    """Cell containing the box center and the raw (dx, dy, log w, log h) that decodes back to `box`."""
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    gx, gy = int(cx // stride), int(cy // stride)
    if grid_size is not None:
        gx, gy = min(max(gx, 0), grid_size - 1), min(max(gy, 0), grid_size - 1)
    raw = np.array([cx / stride - gx, cy / stride - gy, math.log((x1 - x0) / stride), math.log((y1 - y0) / stride)])
    return gx, gy, raw


# =========================
# Cost
# =========================
@dataclass
class CostReport:
    param_count: int
    flop_count: int
    input_size: int

    def lines(self) -> List[str]:
        return [
            f"input {self.input_size}x{self.input_size}",
            f"params {self.param_count:,} ({self.param_count / 1e6:.2f}M; reference {REFERENCE_PARAMS / 1e6:.2f}M)",
            f"FLOPs  {self.flop_count:,} ({self.flop_count / 1e9:.2f}G; reference {REFERENCE_FLOPS / 1e9:.2f}G)",
        ]


def count_cost(module: Module, input_shape: Tuple[int, ...], forward=None) -> CostReport:
    """Exact parameter count and 2 x MACs of one forward pass on zeros."""
    with CostMeter() as meter, nx.no_grad():
        (forward or module)(Tensor(np.zeros(input_shape, dtype=nx.get_default_dtype())))
    return CostReport(module.param_count(), meter.flops, input_shape[-1])


def report_cost(config: NetConfig) -> CostReport:
    model = Detector(config)
    report = count_cost(model, (1, 3, config.input_size, config.input_size))
    logger.info("cost at %d: %d params, %d FLOPs", config.input_size, report.param_count, report.flop_count)
    return report

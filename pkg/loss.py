"""Training objective for the anchor-free head.

Each ground-truth box goes to the level whose nominal object size
(assign_size_factor * stride) is nearest to sqrt(area) on a log scale, and
to the cell there that contains its center.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

import numerics as nx
from metrics import GroundTruth
from network import NetConfig, LevelOutput
from numerics import Tensor

logger = logging.getLogger(__name__)


@dataclass
class LevelTargets:
    flat_index: np.ndarray   # into the (B*H*W) cells of the level
    grid: np.ndarray         # (M, 2) cell x, y
    boxes: np.ndarray        # (M, 4) input-pixel boxes
    classes: np.ndarray      # (M,)
    obj_map: np.ndarray      # (B, 1, H, W) objectness targets


@dataclass
class LossBreakdown:
    iou: Tensor
    obj: Tensor
    cls: Tensor
    total: Tensor
    num_fg: int

    def values(self) -> dict:
        return {"loss_iou": self.iou.item(), "loss_obj": self.obj.item(),
                "loss_cls": self.cls.item(), "loss_total": self.total.item()}


def assign_level(box: Sequence[float], strides: Sequence[int], size_factor: float) -> int:
    side = math.sqrt(max((box[2] - box[0]) * (box[3] - box[1]), 1e-12))
    distances = [abs(math.log(side) - math.log(size_factor * s)) for s in strides]
    return int(np.argmin(distances))  # first minimum is the lower stride


def build_targets(outputs: Sequence[LevelOutput], targets: Sequence[Sequence[GroundTruth]],
                  config: NetConfig) -> List[LevelTargets]:
    strides = [level.stride for level in outputs]
    picked: List[dict] = [dict() for _ in outputs]
    for b, gts in enumerate(targets):
        for gt in gts:
            level = assign_level(gt.box, strides, config.assign_size_factor)
            _, _, H, W = outputs[level].obj.shape
            stride = strides[level]
            cx, cy = (gt.box[0] + gt.box[2]) / 2, (gt.box[1] + gt.box[3]) / 2
            gx = min(max(int(cx // stride), 0), W - 1)
            gy = min(max(int(cy // stride), 0), H - 1)
            key = (b, gy, gx)
            if key in picked[level]:
                logger.debug("cell %s on stride %d already taken; dropping a ground truth", key, stride)
                continue
            picked[level][key] = gt
    result = []
    for level, out in zip(picked, outputs):
        B, _, H, W = out.obj.shape
        obj_map = np.zeros((B, 1, H, W), dtype=out.obj.dtype)
        keys = sorted(level)
        flat, grid, boxes, classes = [], [], [], []
        for (b, gy, gx) in keys:
            gt = level[(b, gy, gx)]
            obj_map[b, 0, gy, gx] = 1.0
            flat.append((b * H + gy) * W + gx)
            grid.append((gx, gy))
            boxes.append(gt.box)
            classes.append(gt.class_id)
        result.append(LevelTargets(
            flat_index=np.asarray(flat, dtype=np.int64),
            grid=np.asarray(grid, dtype=float).reshape(-1, 2),
            boxes=np.asarray(boxes, dtype=float).reshape(-1, 4),
            classes=np.asarray(classes, dtype=np.int64),
            obj_map=obj_map,
        ))
    return result


def _cells(x: Tensor, index: np.ndarray) -> Tensor:
    """(B, C, H, W) -> (M, C) rows at flat cell indices."""
    B, C, H, W = x.shape
    return nx.take(nx.reshape(nx.permute(x, (0, 2, 3, 1)), (B * H * W, C)), index, axis=0)


def _col(x: Tensor, cols) -> Tensor:
    return nx.take(x, np.asarray(cols), axis=1)


def box_iou_loss(pred: Tensor, grid: np.ndarray, stride: int, target: np.ndarray) -> Tensor:
    """Sum of 1 - IoU between decoded predictions (M, 4 raw) and target boxes (M, 4)."""
    dtype = pred.dtype
    M = pred.shape[0]
    center = nx.mul(nx.add(_col(pred, [0, 1]), Tensor(grid.astype(dtype))), float(stride))
    log_size = nx.minimum(_col(pred, [2, 3]), Tensor(np.full((M, 2), 8.0, dtype=dtype)))
    half = nx.mul(nx.exp(log_size), stride / 2.0)
    p_min, p_max = nx.sub(center, half), nx.add(center, half)
    t_min, t_max = Tensor(target[:, :2].astype(dtype)), Tensor(target[:, 2:].astype(dtype))
    wh = nx.relu(nx.sub(nx.minimum(p_max, t_max), nx.maximum(p_min, t_min)))
    inter = nx.mul(_col(wh, [0]), _col(wh, [1]))
    size = nx.sub(p_max, p_min)
    area_p = nx.mul(_col(size, [0]), _col(size, [1]))
    area_t = Tensor(((target[:, 2] - target[:, 0]) * (target[:, 3] - target[:, 1]))[:, None].astype(dtype))
    union = nx.sub(nx.add(area_p, area_t), inter)
    return nx.sum(nx.sub(1.0, nx.div(inter, union)))


def detection_loss(outputs: Sequence[LevelOutput], targets: Sequence[Sequence[GroundTruth]],
                   config: NetConfig) -> LossBreakdown:
    """(w_iou * IoU loss + w_obj * BCE(obj, all cells) + w_cls * BCE(cls, assigned cells)) / max(fg, 1)."""
    level_targets = build_targets(outputs, targets, config)
    iou_terms, obj_terms, cls_terms = [], [], []
    num_fg = 0
    for out, tgt in zip(outputs, level_targets):
        obj_terms.append(nx.sum(nx.bce_with_logits(out.obj, tgt.obj_map)))
        m = tgt.flat_index.size
        if m == 0:
            continue
        num_fg += m
        iou_terms.append(box_iou_loss(_cells(out.box, tgt.flat_index), tgt.grid, out.stride, tgt.boxes))
        onehot = np.zeros((m, config.class_count), dtype=out.cls.dtype)
        onehot[np.arange(m), tgt.classes] = 1.0
        cls_terms.append(nx.sum(nx.bce_with_logits(_cells(out.cls, tgt.flat_index), onehot)))

    def total(terms):
        acc = terms[0] if terms else Tensor(np.zeros((), dtype=outputs[0].obj.dtype))
        for term in terms[1:]:
            acc = nx.add(acc, term)
        return acc
    norm = 1.0 / max(num_fg, 1)
    loss_iou = nx.mul(total(iou_terms), norm)
    loss_obj = nx.mul(total(obj_terms), norm)
    loss_cls = nx.mul(total(cls_terms), norm)
    weighted = nx.add(nx.add(nx.mul(loss_iou, config.iou_weight), nx.mul(loss_obj, config.obj_weight)),
                      nx.mul(loss_cls, config.cls_weight))
    return LossBreakdown(iou=loss_iou, obj=loss_obj, cls=loss_cls, total=weighted, num_fg=num_fg)

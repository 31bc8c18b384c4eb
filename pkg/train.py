"""Training loop: Adam, step-decayed learning rate, prefetching loader, checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from config import TrainConfig
from dataset import AnnotatedImage, to_batch
from inference import evaluate, save_checkpoint
from loss import detection_loss
from metrics import EvalReport, GroundTruth
from network import Detector, NetConfig
from numerics import Graph, Tensor

logger = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "lr", "loss_iou", "loss_obj", "loss_cls", "loss_total", "val_map"]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"loss became {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


# =========================
# Optimizer + schedule
# =========================
class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def set_lr(self, lr: float) -> None:
        self.lr = lr

    def get_lr(self) -> float:
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """initial_lr * factor ** floor(epoch / interval)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.initial_lr * config.lr_decay_factor ** (epoch // config.lr_decay_interval_epochs)


# =========================
# Loader
# =========================
Batch = Tuple[np.ndarray, List[List[GroundTruth]]]
_DONE = object()


def epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(count)


class PrefetchLoader:
    """Batches in seeded order, built ahead on worker lanes.

    Lane `k` builds batches k, k + lanes, ... into its own bounded queue and
    the consumer reads the lanes round-robin, so batch order never depends on
    thread timing. `workers=0` builds batches on the calling thread.
    """

    def __init__(self, records: Sequence[AnnotatedImage], batch_size: int, seed: int, epoch: int,
                 workers: int = 2, prefetch: int = 4):
        order = epoch_order(len(records), seed, epoch)
        self.batches = [[records[i] for i in order[s:s + batch_size]] for s in range(0, len(order), batch_size)]
        self.workers = max(0, workers)
        self.prefetch = max(1, prefetch)

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self) -> Iterator[Batch]:
        if self.workers == 0 or len(self.batches) <= 1:
            for batch in self.batches:
                yield to_batch(batch)
            return
        lanes = min(self.workers, len(self.batches))
        depth = max(1, self.prefetch // lanes)
        queues = [queue.Queue(maxsize=depth) for _ in range(lanes)]
        stop = threading.Event()

        def produce(lane: int) -> None:
            try:
                for i in range(lane, len(self.batches), lanes):
                    item = to_batch(self.batches[i])
                    while not stop.is_set():
                        try:
                            queues[lane].put(item, timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    if stop.is_set():
                        return
            except Exception as exc:  # handed to the consumer
                queues[lane].put(exc)

        threads = [threading.Thread(target=produce, args=(k,), daemon=True) for k in range(lanes)]
        for t in threads:
            t.start()
        try:
            for i in range(len(self.batches)):
                item = queues[i % lanes].get()
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            for t in threads:
                t.join(timeout=1.0)


# =========================
# Training
# =========================
@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss_iou: float
    loss_obj: float
    loss_cls: float
    loss_total: float
    val_map: Optional[float] = None

    def as_row(self) -> list:
        val = "" if self.val_map is None else f"{self.val_map:.6f}"
        return [self.epoch, f"{self.lr:.8g}", f"{self.loss_iou:.6f}", f"{self.loss_obj:.6f}",
                f"{self.loss_cls:.6f}", f"{self.loss_total:.6f}", val]


@dataclass
class TrainResult:
    history: List[EpochLog] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    last_path: Optional[str] = None
    best_path: Optional[str] = None
    log_path: Optional[str] = None
    best_epoch: int = -1
    best_map: Optional[float] = None
    best_report: Optional[EvalReport] = None
    final_report: Optional[EvalReport] = None


def train_step(model: Detector, optimizer: Adam, images: np.ndarray, targets: List[List[GroundTruth]]):
    outputs = model(Tensor(images))
    losses = detection_loss(outputs, targets, model.config)
    values = losses.values()
    if not math.isfinite(values["loss_total"]):
        return values
    graph = Graph.trace(losses.total)
    grads = nx.backward(graph, losses.total, optimizer.params)
    for p, g in zip(optimizer.params, grads):
        p.grad = g
    optimizer.step()
    return values


def train(model: Detector, records: Sequence[AnnotatedImage], config: TrainConfig,
          out_dir: Optional[str] = None, val_records: Optional[Sequence[AnnotatedImage]] = None) -> TrainResult:
    """Fits `model`; checkpoints at the end and at the best validation epoch.

    Without validation records the best epoch is the one with the lowest
    mean total loss.
    """
    if not records:
        raise ValueError("training needs at least one image")
    result = TrainResult()
    optimizer = Adam(model.parameters(), config.initial_lr, config.beta1, config.beta2, config.eps)
    log_fh = writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.log_path = os.path.join(out_dir, "train_log.csv")
        log_fh = open(result.log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_HEADER)
    best_score = -math.inf
    steps = 0
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            optimizer.set_lr(lr)
            loader = PrefetchLoader(records, config.batch_size, config.seed, epoch,
                                    config.loader_workers, config.prefetch_batches)
            sums = np.zeros(4)
            batches = 0
            for batch_index, (images, targets) in enumerate(loader):
                values = train_step(model, optimizer, images, targets)
                total = values["loss_total"]
                if not math.isfinite(total):
                    raise TrainingDiverged(epoch, batch_index, total)
                sums += [values["loss_iou"], values["loss_obj"], values["loss_cls"], total]
                batches += 1
                steps += 1
                result.step_losses.append(total)
                logger.debug("epoch %d batch %d: %s", epoch, batch_index, values)
                if config.max_steps and steps >= config.max_steps:
                    break
            means = sums / max(batches, 1)
            entry = EpochLog(epoch, lr, *means.tolist())
            stopping = epoch == config.epochs - 1 or bool(config.max_steps and steps >= config.max_steps)
            report = None
            score = None if val_records else -entry.loss_total
            if val_records and ((epoch + 1) % config.eval_interval == 0 or stopping):
                report = evaluate(model, val_records, config.eval_conf, title=f"epoch {epoch}")
                entry.val_map = score = report.map
                result.final_report = report
            result.history.append(entry)
            if writer:
                writer.writerow(entry.as_row())
                log_fh.flush()
            logger.info("epoch %d lr %.6g iou %.4f obj %.4f cls %.4f total %.4f val_map %s", epoch, lr,
                        entry.loss_iou, entry.loss_obj, entry.loss_cls, entry.loss_total,
                        "-" if entry.val_map is None else f"{entry.val_map:.4f}")
            if score is not None and score > best_score:
                best_score = score
                result.best_epoch = epoch
                result.best_map = entry.val_map
                result.best_report = report
                if out_dir:
                    result.best_path = os.path.join(out_dir, "best.ckpt")
                    save_checkpoint(result.best_path, model, config)
            if stopping and epoch < config.epochs - 1:
                logger.info("stopping after %d steps", steps)
                break
    finally:
        if log_fh:
            log_fh.close()
    if out_dir:
        result.last_path = os.path.join(out_dir, "last.ckpt")
        save_checkpoint(result.last_path, model, config)
    return result


def build_model(net: NetConfig) -> Detector:
    model = Detector(net)
    logger.info("detector: %d parameters at input %d", model.param_count(), net.input_size)
    return model

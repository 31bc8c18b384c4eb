"""Omnidirectional selective scan over 2-D feature maps.

A map (B, C, H, W) is flattened along eight visiting orders, each order is
scanned by its own selective system, every result is put back on the grid and
the eight grids are summed in a fixed order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from layers import Module, module_case
from numerics import Tensor
from ssm import DEFAULT_CHUNK, SsmParams

logger = logging.getLogger(__name__)


class Direction(str, Enum):
    H_FWD = "h_fwd"          # row-major
    H_REV = "h_rev"
    V_FWD = "v_fwd"          # column-major
    V_REV = "v_rev"
    DIAG_FWD = "diag_fwd"    # anti-diagonals r+c ascending, r ascending inside
    DIAG_REV = "diag_rev"
    RDIAG_FWD = "rdiag_fwd"  # main diagonals c-r ascending, r ascending inside
    RDIAG_REV = "rdiag_rev"

    @property
    def is_reversed(self) -> bool:
        return self.value.endswith("_rev")

    @property
    def forward(self) -> "Direction":
        return Direction(self.value.replace("_rev", "_fwd"))


ALL_DIRECTIONS: Tuple[Direction, ...] = tuple(Direction)


def parse_directions(text: str) -> Tuple[Direction, ...]:
    """'all' or a comma-separated list of direction names."""
    text = text.strip()
    if text in ("", "all"):
        return ALL_DIRECTIONS
    try:
        return tuple(Direction(part.strip()) for part in text.split(","))
    except ValueError as exc:
        raise ValueError(f"unknown scan direction in {text!r}; choose from {[d.value for d in Direction]}") from exc


@dataclass(frozen=True)
class DirectionMap:
    direction: Direction
    height: int
    width: int
    order: np.ndarray    # visit position -> flat site
    inverse: np.ndarray  # flat site -> visit position

    def flatten(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        if (H, W) != (self.height, self.width):
            raise nx.ShapeError(f"direction map built for {self.height}x{self.width}, input is {H}x{W}")
        return nx.take(nx.reshape(x, (B, C, H * W)), self.order, axis=2)

    def unflatten(self, seq: Tensor) -> Tensor:
        B, C, L = seq.shape
        if L != self.height * self.width:
            raise nx.ShapeError(f"sequence axis 2 has length {L}, map covers {self.height * self.width} sites")
        return nx.reshape(nx.take(seq, self.inverse, axis=2), (B, C, self.height, self.width))


def _forward_order(base: Direction, H: int, W: int) -> np.ndarray:
    flat = np.arange(H * W)
    r, c = flat // W, flat % W
    if base is Direction.H_FWD:
        return flat
    if base is Direction.V_FWD:
        return flat.reshape(H, W).T.ravel()
    if base is Direction.DIAG_FWD:
        return np.lexsort((r, r + c))
    return np.lexsort((r, c - r))


@lru_cache(maxsize=None)
def build_direction_map(direction: Direction, H: int, W: int) -> DirectionMap:
    if H < 1 or W < 1:
        raise ValueError(f"direction map needs a non-empty grid, got {H}x{W}")
    direction = Direction(direction)
    logger.debug("building %s map for %dx%d", direction.value, H, W)
    order = _forward_order(direction.forward, H, W)
    if direction.is_reversed:
        order = order[::-1]
    order = np.ascontiguousarray(order, dtype=np.int64)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    order.setflags(write=False)
    inverse.setflags(write=False)
    return DirectionMap(direction, H, W, order, inverse)


class OssmBlock(Module):
    """One independent selective system per active direction; outputs are summed."""

    def __init__(self, channels: int, d_state: int = 16, directions: Sequence[Direction] = ALL_DIRECTIONS,
                 rng: Optional[np.random.Generator] = None, kernel: str = "sequential", chunk: int = DEFAULT_CHUNK):
        if not directions:
            raise ValueError("OssmBlock needs at least one direction")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.d_state = channels, d_state
        self.directions = tuple(Direction(d) for d in directions)
        self.kernel, self.chunk = kernel, chunk
        self.scans: Dict[str, SsmParams] = {d.value: SsmParams(channels, d_state, rng=rng) for d in self.directions}

    def forward(self, x: Tensor) -> Tensor:
        return ossm_forward(x, self)


def ossm_forward(x: Tensor, block: OssmBlock) -> Tensor:
    if x.ndim != 4 or x.shape[1] != block.channels:
        raise nx.ShapeError(f"ossm: expected (B, {block.channels}, H, W), got {x.shape}")
    _, _, H, W = x.shape
    total = None
    for direction in block.directions:
        dmap = build_direction_map(direction, H, W)
        seq = block.scans[direction.value](dmap.flatten(x), kernel=block.kernel, chunk=block.chunk)
        grid = dmap.unflatten(seq)
        total = grid if total is None else nx.add(total, grid)
    return total


def receptive_mask(block: OssmBlock, H: int, W: int, site: Tuple[int, int], seed: int = 0) -> np.ndarray:
    """Boolean (H, W) mask of output sites that move when the input at `site` moves."""
    r, c = site
    if not (0 <= r < H and 0 <= c < W):
        raise ValueError(f"site {site} outside the {H}x{W} grid")
    rng = np.random.default_rng(seed)
    base = 0.1 * rng.standard_normal((1, block.channels, H, W))
    moved = base.copy()
    moved[:, :, r, c] += 1.0
    with nx.default_dtype(np.float64), nx.no_grad():
        diff = ossm_forward(nx.Tensor(moved), block).data - ossm_forward(nx.Tensor(base), block).data
    return np.any(diff != 0, axis=(0, 1))


@nx.register_gradcheck("ossm")
def _case_ossm(rng, spec):
    B, C, H, W = spec or (1, 2, 2, 3)
    return module_case(OssmBlock(C, d_state=2, rng=rng), rng.standard_normal((B, C, H, W)))

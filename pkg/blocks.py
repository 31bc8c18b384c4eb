"""Composite blocks: channel attention, the two VSS branches and the VSS module."""
from __future__ import annotations

from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from layers import Conv2d, LayerNorm, Linear, Module, module_case
from numerics import Tensor
from oss2d import ALL_DIRECTIONS, Direction, OssmBlock
from ssm import DEFAULT_CHUNK

ABMLP_REDUCTION = 4


class AbmlpBlock(Module):
    """Pool -> 3 linears (ReLU, ReLU, sigmoid) -> per-channel weights in (0, 1)."""

    def __init__(self, channels: int, reduction: int = ABMLP_REDUCTION, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.fc1 = Linear(channels, hidden, rng=rng)
        self.fc2 = Linear(hidden, hidden, rng=rng)
        self.fc3 = Linear(hidden, channels, rng=rng)

    def weights(self, x: Tensor) -> Tensor:
        B, C = x.shape[:2]
        y = nx.relu(self.fc1(nx.global_avg_pool(x)))
        y = nx.relu(self.fc2(y))
        return nx.reshape(nx.sigmoid(self.fc3(y)), (B, C, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return abmlp_forward(x, self)


def abmlp_forward(x: Tensor, block: AbmlpBlock) -> Tensor:
    if x.ndim != 4 or x.shape[1] != block.channels:
        raise nx.ShapeError(f"abmlp: axis 1 has extent {x.shape[1] if x.ndim > 1 else None}, block expects {block.channels}")
    return nx.mul(x, block.weights(x))


class FrmBranch(Module):
    """Compress channels by half, reweight them, restore the width."""

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None):
        if channels % 2:
            raise ValueError(f"FrmBranch needs an even channel count, got {channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.compress = Conv2d(channels, channels // 2, 1, bias=False, rng=rng)
        self.attention = AbmlpBlock(channels // 2, rng=rng)
        self.restore = Conv2d(channels // 2, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return frm_forward(x, self)


def frm_forward(x: Tensor, branch: FrmBranch) -> Tensor:
    if x.ndim != 4 or x.shape[1] != branch.channels:
        raise nx.ShapeError(f"frm: expected (B, {branch.channels}, H, W), got {x.shape}")
    y = nx.silu(branch.compress(x))
    return branch.restore(branch.attention(y))


class OssBranch(Module):
    def __init__(self, channels: int, d_state: int = 16, directions: Sequence[Direction] = ALL_DIRECTIONS,
                 rng: Optional[np.random.Generator] = None, kernel: str = "sequential", chunk: int = DEFAULT_CHUNK):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.norm = LayerNorm(channels)
        self.gate = Linear(channels, channels, rng=rng)
        self.in_proj = Linear(channels, channels, rng=rng)
        self.dwconv = Conv2d(channels, channels, 3, padding=1, groups=channels, rng=rng)
        self.ossm = OssmBlock(channels, d_state, directions, rng=rng, kernel=kernel, chunk=chunk)
        self.out_norm = LayerNorm(channels)
        self.mix = Linear(channels, channels, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise nx.ShapeError(f"oss: expected (B, {self.channels}, H, W), got {x.shape}")
        z = self.norm(x)
        gate = nx.silu(self.gate(z))
        path = nx.silu(self.dwconv(self.in_proj(z)))
        path = self.out_norm(self.ossm(path))
        return nx.add(x, self.mix(nx.mul(gate, path)))


class VssVariant(str, Enum):
    VSS1 = "vss1"  # C -> C/2, no shortcut
    VSS2 = "vss2"  # C -> C, identity shortcut


class VssModule(Module):
    def __init__(self, channels: int, variant: VssVariant = VssVariant.VSS2, d_state: int = 16,
                 directions: Sequence[Direction] = ALL_DIRECTIONS, rng: Optional[np.random.Generator] = None,
                 kernel: str = "sequential", chunk: int = DEFAULT_CHUNK):
        if channels % 2:
            raise ValueError(f"VssModule needs an even channel count, got {channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.variant = VssVariant(variant)
        half = channels // 2
        self.frm = FrmBranch(half, rng=rng)
        self.oss = OssBranch(half, d_state, directions, rng=rng, kernel=kernel, chunk=chunk)
        self.out_channels = channels if self.variant is VssVariant.VSS2 else half
        self.fuse = Conv2d(channels, self.out_channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return vss_forward(x, self)


def vss_branches(x: Tensor, module: VssModule) -> Tuple[Tensor, Tensor]:
    """The FRM and OSS outputs before they are concatenated."""
    if x.ndim != 4 or x.shape[1] != module.channels:
        raise nx.ShapeError(f"vss: expected (B, {module.channels}, H, W), got {x.shape}")
    first, second = nx.split_channels(x, 2, axis=1)
    return module.frm(first), module.oss(second)


def vss_forward(x: Tensor, module: VssModule) -> Tensor:
    out = module.fuse(nx.concat(vss_branches(x, module), axis=1))
    if module.variant is VssVariant.VSS2:
        out = nx.add(out, x)
    return out


# ------------------------ gradient-check cases ------------------------
@nx.register_gradcheck("abmlp")
def _case_abmlp(rng, spec):
    B, C, H, W = spec or (2, 8, 3, 3)
    block = AbmlpBlock(C, rng=rng)
    block.fc1.bias.data[:] = 1.0  # keep the ReLUs away from their kink
    block.fc2.bias.data[:] = 1.0
    return module_case(block, rng.standard_normal((B, C, H, W)))


@nx.register_gradcheck("frm")
def _case_frm(rng, spec):
    B, C, H, W = spec or (2, 4, 3, 3)
    branch = FrmBranch(C, rng=rng)
    branch.attention.fc1.bias.data[:] = 1.0
    branch.attention.fc2.bias.data[:] = 1.0
    return module_case(branch, rng.standard_normal((B, C, H, W)))


@nx.register_gradcheck("vss2")
def _case_vss2(rng, spec):
    B, C, H, W = spec or (1, 4, 2, 2)
    module = VssModule(C, VssVariant.VSS2, d_state=2, rng=rng)
    module.frm.attention.fc1.bias.data[:] = 1.0
    module.frm.attention.fc2.bias.data[:] = 1.0
    return module_case(module, rng.standard_normal((B, C, H, W)))


@nx.register_gradcheck("vss1")
def _case_vss1(rng, spec):
    B, C, H, W = spec or (1, 4, 2, 2)
    module = VssModule(C, VssVariant.VSS1, d_state=2, directions=(Direction.H_FWD, Direction.V_REV), rng=rng)
    module.frm.attention.fc1.bias.data[:] = 1.0
    module.frm.attention.fc2.bias.data[:] = 1.0
    return module_case(module, rng.standard_normal((B, C, H, W)))

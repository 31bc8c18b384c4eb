"""Parameter-holding layers on top of the numerics operators."""
from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

import numerics as nx
from numerics import Tensor

# ------------------------ cost meter ------------------------
_METERS: List["CostMeter"] = []


class CostMeter:
    """Counts 2 x multiply-accumulates of convs/linears run inside the block, per image."""

    def __init__(self) -> None:
        self.flops = 0

    def __enter__(self) -> "CostMeter":
        _METERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _METERS.remove(self)


def _record_macs(macs: int) -> None:
    for meter in _METERS:
        meter.flops += 2 * int(macs)


# ------------------------ module base ------------------------
class Module:
    """Parameters are discovered from attributes, in definition order."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{key}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ValueError(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(value, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# ------------------------ layers ------------------------
class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 1, stride: int = 1, padding: Optional[int] = None,
                 groups: int = 1, bias: bool = True, rng: Optional[np.random.Generator] = None):
        if cin % groups or cout % groups:
            raise ValueError(f"Conv2d: cin={cin} and cout={cout} must be divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.groups = stride, groups
        self.padding = kernel // 2 if padding is None else padding
        fan_in = cin // groups * kernel * kernel
        self.weight = nx.parameter(_uniform(rng, fan_in, (cout, cin // groups, kernel, kernel)))
        self.bias = nx.parameter(_uniform(rng, fan_in, (cout,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = nx.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)
        _, _, ho, wo = out.shape
        _record_macs(ho * wo * self.cout * (self.cin // self.groups) * self.kernel * self.kernel)
        return out


class Linear(Module):
    """Dense layer along one axis; axis=1 on (B, C, ...) acts per site."""

    def __init__(self, fin: int, fout: int, bias: bool = True, axis: int = 1,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fin, self.fout, self.axis = fin, fout, axis
        self.weight = nx.parameter(_uniform(rng, fin, (fout, fin)))
        self.bias = nx.parameter(_uniform(rng, fin, (fout,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = nx.linear(x, self.weight, self.bias, axis=self.axis)
        sites = x.size // (x.shape[0] * self.fin)
        _record_macs(sites * self.fin * self.fout)
        return out


class LayerNorm(Module):
    def __init__(self, channels: int, axis: int = 1, eps: float = nx.LN_EPS):
        self.axis, self.eps = axis, eps
        self.weight = nx.parameter(np.ones(channels))
        self.bias = nx.parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.weight, self.bias, axis=self.axis, eps=self.eps)


def _resolve(owner, part: str):
    if isinstance(owner, dict):
        return owner[part]
    if isinstance(owner, (list, tuple)):
        return owner[int(part)]
    return getattr(owner, part)


def replace_parameter(module: Module, name: str, value: Tensor) -> None:
    *path, attr = name.split(".")
    owner = module
    for part in path:
        owner = _resolve(owner, part)
    setattr(owner, attr, value)


def module_case(module: Module, x: np.ndarray, forward=None):
    """Gradient-check case over an input and every parameter of `module`."""
    names = [name for name, _ in module.named_parameters()]
    inputs = {"x": x}
    inputs.update({name: p.data.astype(np.float64) for name, p in module.named_parameters()})
    forward = forward or module

    def fn(x, *values):
        for name, value in zip(names, values):
            replace_parameter(module, name, value)
        return forward(x)
    return fn, inputs

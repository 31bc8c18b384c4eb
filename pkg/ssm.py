"""Selective state-space scan.

Continuous system per channel d and state n:  h' = A h + B x,  y = C h + D x,
with diagonal A < 0. Zero-order hold gives

    A_bar = exp(delta * a)
    B_bar = (exp(delta * a) - 1) / a * b

and the recurrence h_k = A_bar_k h_{k-1} + B_bar_k x_k, y_k = C_k . h_k + D x_k.
Delta, B and C are projections of x_k (the selective part); D is not.

Array layout used by the kernels:
    x, delta  [B, D, L]      a  [D, N]      b, c  [B, N, L]      d  [D]
"""
from __future__ import annotations

import csv
import logging
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import numerics as nx
from layers import Module, module_case
from numerics import Tensor

logger = logging.getLogger(__name__)

SERIES_CUTOFF = 1e-6        # |delta*a| below this uses the series for B_bar
GRAD_SERIES_CUTOFF = 1e-4   # same for d(B_bar)/da, which cancels worse
FULL_STORAGE_MAX = 4096     # longer sequences keep checkpoints and recompute
CHECKPOINT_STRIDE = 1024
DEFAULT_CHUNK = 64
DEFAULT_WORKERS = int(os.environ.get("FERYOLO_WORKERS", "0")) or min(os.cpu_count() or 1, 8)

BENCH_CSV_HEADER = ["kernel", "L", "D", "N", "median_ns", "throughput"]


# =========================
# Discretization
# =========================
@dataclass
class DiscreteSystem:
    a_bar: np.ndarray
    b_bar: np.ndarray


def _zoh_gain(da, a, delta):
    small = np.abs(da) < SERIES_CUTOFF
    a_safe = np.where(small, 1.0, a)
    return np.where(small, delta * (1 + da / 2 + da * da / 6), np.expm1(da) / a_safe)


def _zoh_gain_da(da, a, delta):
    """d/da of the zero-order-hold gain (exp(delta a) - 1) / a."""
    small = np.abs(da) < GRAD_SERIES_CUTOFF
    a_safe = np.where(small, 1.0, a)
    return np.where(small, delta * delta * (0.5 + da / 3 + da * da / 8),
                    (da * np.exp(da) - np.expm1(da)) / (a_safe * a_safe))


def discretize(a, b, delta, method: str = "zoh") -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise (A_bar, B_bar). method="euler" keeps A_bar but uses B_bar = delta * b."""
    a, b, delta = np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(delta, dtype=float)
    if np.any(delta <= 0):
        raise ValueError("discretize: delta must be strictly positive")
    da = delta * a
    a_bar = np.exp(da)
    if method == "zoh":
        return a_bar, _zoh_gain(da, a, delta) * b
    if method == "euler":
        return a_bar, delta * b
    raise ValueError(f"discretize: unknown method {method!r} (use 'zoh' or 'euler')")


def combine(e2: Tuple[np.ndarray, np.ndarray], e1: Tuple[np.ndarray, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Apply e1 then e2: (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2)."""
    a2, b2 = e2
    a1, b1 = e1
    return a2 * a1, a2 * b1 + b2


# =========================
# Kernels
# =========================
@dataclass
class ScanState:
    h: np.ndarray   # [B, D, N]
    position: int


@dataclass
class KernelResult:
    y: np.ndarray       # [B, D, L]
    states: np.ndarray  # [B, D, N, L], h_k after step k

    @property
    def final_state(self) -> ScanState:
        return ScanState(h=self.states[..., -1].copy(), position=self.states.shape[-1])


def _validate(x, delta, a, b, c, d) -> None:
    if x.ndim != 3:
        raise nx.ShapeError(f"scan: x must be [B, D, L], got {x.shape}")
    B, D, L = x.shape
    if L == 0:
        raise ValueError("scan: sequence length must be at least 1")
    N = a.shape[1]
    if delta.shape != x.shape:
        raise nx.ShapeError(f"scan: delta shape {delta.shape} != x shape {x.shape}")
    if a.shape[0] != D:
        raise nx.ShapeError(f"scan: a axis 0 has extent {a.shape[0]}, x has {D} channels")
    for name, arr in (("b", b), ("c", c)):
        if arr.shape != (B, N, L):
            raise nx.ShapeError(f"scan: {name} shape {arr.shape} != {(B, N, L)}")
    if d.shape != (D,):
        raise nx.ShapeError(f"scan: d shape {d.shape} != {(D,)}")
    if np.any(delta <= 0):
        raise ValueError("scan: delta must be strictly positive")


def _inputs(x, delta, a, b):
    """A_bar and B_bar * x, both [B, D, N, L]."""
    a4 = a[None, :, :, None]
    delta4 = delta[:, :, None, :]
    da = delta4 * a4
    a_bar = np.exp(da)
    u = _zoh_gain(da, a4, delta4) * b[:, None, :, :] * x[:, :, None, :]
    return a_bar, u.astype(x.dtype, copy=False)


def _sequential_states(a_bar: np.ndarray, u: np.ndarray, h0: Optional[np.ndarray]) -> np.ndarray:
    states = np.empty_like(u)
    h = np.zeros(u.shape[:3], dtype=u.dtype) if h0 is None else h0
    for k in range(u.shape[-1]):
        h = a_bar[..., k] * h + u[..., k]
        states[..., k] = h
    return states


def _chunked_states(a_bar: np.ndarray, u: np.ndarray, chunk: int, h0: Optional[np.ndarray]) -> np.ndarray:
    """Scan each chunk from zero, fold chunk summaries left to right, then fix up."""
    B, D, N, L = u.shape
    K = -(-L // chunk)
    pad = K * chunk - L
    if pad:
        # identity elements (1, 0) after the end leave earlier states untouched
        a_bar = np.concatenate([a_bar, np.ones((B, D, N, pad), dtype=a_bar.dtype)], axis=-1)
        u = np.concatenate([u, np.zeros((B, D, N, pad), dtype=u.dtype)], axis=-1)
    a_c = a_bar.reshape(B, D, N, K, chunk)
    u_c = u.reshape(B, D, N, K, chunk)
    local = np.empty_like(u_c)
    prod = np.empty_like(a_c)
    local[..., 0] = u_c[..., 0]
    prod[..., 0] = a_c[..., 0]
    for t in range(1, chunk):
        prod[..., t], local[..., t] = combine((a_c[..., t], u_c[..., t]), (prod[..., t - 1], local[..., t - 1]))
    carry = np.empty((B, D, N, K), dtype=u.dtype)
    h = np.zeros((B, D, N), dtype=u.dtype) if h0 is None else h0
    for k in range(K):
        carry[..., k] = h
        h = prod[..., k, -1] * h + local[..., k, -1]
    states = local + prod * carry[..., None]
    return states.reshape(B, D, N, K * chunk)[..., :L]


def _readout(states, c, d, x) -> np.ndarray:
    return np.einsum("bdnl,bnl->bdl", states, c) + d[None, :, None] * x


def selective_scan_sequential(x, delta, a, b, c, d, h0: Optional[np.ndarray] = None) -> KernelResult:
    """Reference kernel: one step at a time over L, vectorised over B, D, N."""
    _validate(x, delta, a, b, c, d)
    a_bar, u = _inputs(x, delta, a, b)
    states = _sequential_states(a_bar, u, h0)
    return KernelResult(y=_readout(states, c, d, x), states=states)


def selective_scan_parallel(x, delta, a, b, c, d, chunk: int = DEFAULT_CHUNK,
                            workers: Optional[int] = None, h0: Optional[np.ndarray] = None) -> KernelResult:
    """Chunked kernel; channel slices run on worker lanes. Result does not depend on `workers`."""
    if chunk < 1:
        raise ValueError(f"scan: chunk must be >= 1, got {chunk}")
    _validate(x, delta, a, b, c, d)
    L = x.shape[-1]
    if chunk >= L:
        return selective_scan_sequential(x, delta, a, b, c, d, h0=h0)
    D = x.shape[1]
    workers = max(1, min(workers or DEFAULT_WORKERS, D))

    def lane(channels: slice) -> np.ndarray:
        a_bar, u = _inputs(x[:, channels], delta[:, channels], a[channels], b)
        return _chunked_states(a_bar, u, chunk, None if h0 is None else h0[:, channels])

    if workers == 1:
        states = lane(slice(None))
    else:
        bounds = np.linspace(0, D, workers + 1).astype(int)
        slices = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ThreadPoolExecutor(max_workers=len(slices)) as pool:
            states = np.concatenate(list(pool.map(lane, slices)), axis=1)
    return KernelResult(y=_readout(states, c, d, x), states=states)


def scan_resume(x, delta, a, b, c, d, state: Optional[ScanState] = None) -> Tuple[np.ndarray, ScanState]:
    """Continue a sequential scan from `state`; splitting a sequence changes nothing."""
    result = selective_scan_sequential(x, delta, a, b, c, d, h0=None if state is None else state.h)
    final = result.final_state
    final.position += 0 if state is None else state.position
    return result.y, final


# =========================
# Backward
# =========================
@dataclass
class ScanSaved:
    x: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    states: Optional[np.ndarray] = None             # every h_k, short sequences
    checkpoints: Optional[List[np.ndarray]] = None  # h just before each segment start
    segment: int = CHECKPOINT_STRIDE

    @classmethod
    def capture(cls, x, delta, a, b, c, d, states: np.ndarray) -> "ScanSaved":
        saved = cls(x=x, delta=delta, a=a, b=b, c=c, d=d, segment=CHECKPOINT_STRIDE)
        L = x.shape[-1]
        if L <= FULL_STORAGE_MAX:
            saved.states = states
        else:
            zero = np.zeros(states.shape[:3], dtype=states.dtype)
            saved.checkpoints = [zero if s == 0 else states[..., s - 1].copy() for s in range(0, L, saved.segment)]
        return saved


@dataclass
class ScanGrads:
    x: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray


def scan_backward(grad_out: np.ndarray, saved: Optional[ScanSaved]) -> ScanGrads:
    """Reverse recurrence g_k = C_k gy_k + A_bar_{k+1} g_{k+1}, then local chain rules."""
    if saved is None or (saved.states is None and saved.checkpoints is None):
        raise ValueError("scan_backward: forward state was not saved")
    x, delta, a, b, c, d = saved.x, saved.delta, saved.a, saved.b, saved.c, saved.d
    B, D, L = x.shape
    N = a.shape[1]
    gx = d[None, :, None] * grad_out
    gdelta = np.zeros_like(delta)
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    gc = np.zeros_like(c)
    if saved.states is not None:
        segments = [(0, L)]
    else:
        segments = [(s, min(s + saved.segment, L)) for s in range(0, L, saved.segment)]
    a4 = a[None, :, :, None]
    carry = np.zeros((B, D, N), dtype=x.dtype)
    for index in range(len(segments) - 1, -1, -1):
        start, stop = segments[index]
        sl = slice(start, stop)
        delta4 = delta[:, :, None, sl]
        da = delta4 * a4
        a_bar = np.exp(da)
        gain = _zoh_gain(da, a4, delta4)
        b_bar = gain * b[:, None, :, sl]
        xs = x[:, :, None, sl]
        if saved.states is not None:
            h = saved.states
            h_before = np.zeros((B, D, N), dtype=x.dtype)
        else:
            h_before = saved.checkpoints[index]
            h = _sequential_states(a_bar, b_bar * xs, h_before)
        gy = grad_out[:, :, sl]
        cg = c[:, None, :, sl] * gy[:, :, None, :]
        gh = np.empty_like(h)
        g = carry
        for t in range(stop - start - 1, -1, -1):
            g = cg[..., t] + g
            gh[..., t] = g
            g = a_bar[..., t] * g
        carry = g
        h_prev = np.concatenate([h_before[..., None], h[..., :-1]], axis=-1)
        g_abar = gh * h_prev
        g_bbar = gh * xs
        gx[:, :, sl] += (gh * b_bar).sum(axis=2)
        gb[:, :, sl] = (g_bbar * gain).sum(axis=1)
        g_gain = g_bbar * b[:, None, :, sl]
        gdelta[:, :, sl] = (g_abar * a_bar * a4 + g_gain * a_bar).sum(axis=2)
        ga += (g_abar * a_bar * delta4 + g_gain * _zoh_gain_da(da, a4, delta4)).sum(axis=(0, 3))
        gc[:, :, sl] = (gy[:, :, None, :] * h).sum(axis=1)
    gd = (grad_out * x).sum(axis=(0, 2))
    return ScanGrads(x=gx, delta=gdelta, a=ga, b=gb, c=gc, d=gd)


# =========================
# Graph operator
# =========================
def selective_scan(x: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor,
                   kernel: str = "sequential", chunk: int = DEFAULT_CHUNK,
                   workers: Optional[int] = None) -> Tensor:
    args = [t.data for t in (x, delta, a, b, c, d)]
    if kernel == "sequential":
        result = selective_scan_sequential(*args)
    elif kernel == "parallel":
        result = selective_scan_parallel(*args, chunk=chunk, workers=workers)
    else:
        raise ValueError(f"scan: unknown kernel {kernel!r}")
    saved = None
    if nx.grad_enabled() and any(t.requires_grad for t in (x, delta, a, b, c, d)):
        saved = ScanSaved.capture(*args, states=result.states)

    def backprop(g):
        grads = scan_backward(g, saved)
        return grads.x, grads.delta, grads.a, grads.b, grads.c, grads.d
    return nx.make_op(result.y.astype(x.dtype, copy=False), (x, delta, a, b, c, d), backprop, "selective_scan")


def softplus_inverse(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SsmParams(Module):
    """One selective system over `channels` inputs with `d_state` diagonal states each."""

    def __init__(self, channels: int, d_state: int = 16, rng: Optional[np.random.Generator] = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.d_state = channels, d_state
        bound = 1.0 / np.sqrt(channels)
        # A = -exp(a_log) = -(1..N) per channel
        self.a_log = nx.parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=float), (channels, 1))))
        self.b_proj = nx.parameter(rng.uniform(-bound, bound, (d_state, channels)))
        self.c_proj = nx.parameter(rng.uniform(-bound, bound, (d_state, channels)))
        self.delta_proj = nx.parameter(rng.uniform(-bound, bound, (channels, channels)))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), channels))
        self.delta_bias = nx.parameter(softplus_inverse(dt))
        self.d_skip = nx.parameter(np.ones(channels))

    def a_matrix(self) -> Tensor:
        return nx.mul(nx.exp(self.a_log), -1.0)

    def project(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Per-step delta [B, D, L] (positive), b and c [B, N, L]."""
        delta = nx.softplus(nx.linear(x, self.delta_proj, self.delta_bias, axis=1))
        return delta, nx.linear(x, self.b_proj, None, axis=1), nx.linear(x, self.c_proj, None, axis=1)

    def discrete(self, x: Tensor) -> DiscreteSystem:
        with nx.no_grad():
            delta, b, _ = self.project(x)
            a = self.a_matrix()
        a4, delta4 = a.data[None, :, :, None], delta.data[:, :, None, :]
        a_bar, b_bar = discretize(a4, b.data[:, None, :, :], delta4)
        return DiscreteSystem(a_bar=a_bar, b_bar=b_bar)

    def forward(self, x: Tensor, kernel: str = "sequential", chunk: int = DEFAULT_CHUNK,
                workers: Optional[int] = None) -> Tensor:
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise nx.ShapeError(f"scan: expected [B, {self.channels}, L], got {x.shape}")
        delta, b, c = self.project(x)
        return selective_scan(x, delta, self.a_matrix(), b, c, self.d_skip, kernel, chunk, workers)


def scan_sequential(x: Tensor, params: SsmParams) -> Tensor:
    return params(x, kernel="sequential")


def scan_parallel(x: Tensor, params: SsmParams, chunk: int = DEFAULT_CHUNK, workers: Optional[int] = None) -> Tensor:
    if chunk < 1:
        raise ValueError(f"scan: chunk must be >= 1, got {chunk}")
    return params(x, kernel="parallel", chunk=chunk, workers=workers)


# ------------------------ gradient-check cases ------------------------
def _scan_case_inputs(rng, spec):
    B, D, N, L = spec or (1, 2, 3, 12)
    return {
        "x": rng.standard_normal((B, D, L)),
        "delta": rng.uniform(0.1, 1.0, (B, D, L)),
        "a": -rng.uniform(0.5, 2.0, (D, N)),
        "b": rng.standard_normal((B, N, L)),
        "c": rng.standard_normal((B, N, L)),
        "d": rng.standard_normal(D),
    }


@nx.register_gradcheck("selective_scan")
def _case_selective_scan(rng, spec):
    return selective_scan, _scan_case_inputs(rng, spec)


@nx.register_gradcheck("selective_scan_parallel")
def _case_selective_scan_parallel(rng, spec):
    return (lambda *t: selective_scan(*t, kernel="parallel", chunk=4, workers=2)), _scan_case_inputs(rng, spec)


@nx.register_gradcheck("ssm")
def _case_ssm(rng, spec):
    B, D, N, L = spec or (1, 3, 2, 6)
    return module_case(SsmParams(D, N, rng=rng), rng.standard_normal((B, D, L)))


# =========================
# Continuous reference
# =========================
def continuous_response(a: float, b: float, c: float, times, u: str = "constant", omega: float = 1.0) -> np.ndarray:
    """y(t) = c h(t) of h' = a h + b u(t), h(0) = 0, for u = 1 or u = sin(omega t)."""
    t = np.asarray(times, dtype=float)
    if u == "constant":
        h = b * t if a == 0 else b * np.expm1(a * t) / a
    elif u == "sin":
        h = b * (omega * np.exp(a * t) - omega * np.cos(omega * t) - a * np.sin(omega * t)) / (a * a + omega * omega)
    else:
        raise ValueError(f"continuous_response: unknown input {u!r} (use 'constant' or 'sin')")
    return c * h


def sampled_response(a: float, b: float, c: float, delta: float, steps: int,
                     u: str = "constant", omega: float = 1.0, method: str = "zoh") -> Tuple[np.ndarray, np.ndarray]:
    """Discrete 1-state response; the input is held at its value from the start of each step.

    Returns (times, y) with times[k] = (k + 1) * delta, the end of step k.
    """
    if steps < 1:
        raise ValueError("sampled_response: steps must be >= 1")
    starts = np.arange(steps) * delta
    x = np.ones(steps) if u == "constant" else np.sin(omega * starts)
    a_bar, b_bar = discretize(a, b, delta, method=method)
    h = 0.0
    y = np.empty(steps)
    for k in range(steps):
        h = a_bar * h + b_bar * x[k]
        y[k] = c * h
    return starts + delta, y


# =========================
# Benchmark
# =========================
@dataclass
class BenchRow:
    kernel: str
    L: int
    D: int
    N: int
    median_ns: int
    throughput: float  # scanned elements (B * D * L) per second

    def as_csv_row(self) -> list:
        return [self.kernel, self.L, self.D, self.N, self.median_ns, f"{self.throughput:.1f}"]


def bench_scan(L: Union[int, Sequence[int]], D: int, N: int, kernel: str = "sequential", repeats: int = 5,
               chunk: int = DEFAULT_CHUNK, workers: Optional[int] = None, batch: int = 1,
               seed: int = 0) -> List[BenchRow]:
    """Median wall time per sequence length; one row per length."""
    lengths = [L] if isinstance(L, int) else list(L)
    if min([D, N, repeats, batch] + lengths) < 1:
        raise ValueError("bench_scan: sizes and repeats must be positive")
    if kernel not in ("sequential", "parallel"):
        raise ValueError(f"bench_scan: unknown kernel {kernel!r}")
    rng = np.random.default_rng(seed)
    rows = []
    for length in lengths:
        x = rng.standard_normal((batch, D, length)).astype(np.float32)
        delta = rng.uniform(1e-3, 0.1, (batch, D, length)).astype(np.float32)
        a = -np.tile(np.arange(1, N + 1, dtype=np.float32), (D, 1))
        b = rng.standard_normal((batch, N, length)).astype(np.float32)
        c = rng.standard_normal((batch, N, length)).astype(np.float32)
        d = np.ones(D, dtype=np.float32)
        timings = []
        for _ in range(repeats):
            started = time.perf_counter_ns()
            if kernel == "sequential":
                selective_scan_sequential(x, delta, a, b, c, d)
            else:
                selective_scan_parallel(x, delta, a, b, c, d, chunk=chunk, workers=workers)
            timings.append(time.perf_counter_ns() - started)
        median_ns = int(statistics.median(timings))
        row = BenchRow(kernel, length, D, N, median_ns, batch * D * length / max(median_ns, 1) * 1e9)
        logger.info("bench %s L=%d D=%d N=%d: %.3f ms", kernel, length, D, N, median_ns / 1e6)
        rows.append(row)
    return rows


def write_bench_csv(rows: Iterable[BenchRow], fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(BENCH_CSV_HEADER)
    for row in rows:
        writer.writerow(row.as_csv_row())

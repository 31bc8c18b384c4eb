import io
import math

import numpy as np
import pytest
from scipy.signal import cont2discrete

import numerics as nx
import ssm
from numerics import Tensor
from ssm import (
    SsmParams,
    continuous_response,
    discretize,
    sampled_response,
    scan_backward,
    scan_resume,
    selective_scan_parallel,
    selective_scan_sequential,
)


def _scan_inputs(rng, B, D, N, L, dtype=np.float32):
    return (
        rng.standard_normal((B, D, L)).astype(dtype),
        rng.uniform(0.01, 0.5, (B, D, L)).astype(dtype),
        -rng.uniform(0.5, float(N) + 0.5, (D, N)).astype(dtype),
        rng.standard_normal((B, N, L)).astype(dtype),
        rng.standard_normal((B, N, L)).astype(dtype),
        rng.standard_normal(D).astype(dtype),
    )


def _close(actual, expected, tol):
    scale = max(1.0, float(np.abs(expected).max()))
    return float(np.abs(actual - expected).max()) <= tol * scale


# ------------------------ discretization ------------------------
def test_zoh_closed_form_half():
    a_bar, b_bar = discretize(-1.0, 1.0, math.log(2.0))
    assert abs(a_bar - 0.5) < 1e-12
    assert abs(b_bar - 0.5) < 1e-12


@pytest.mark.parametrize("a", [0.0, -1e-9, 1e-9, -1e-7])
def test_zoh_integrator_limit(a):
    a_bar, b_bar = discretize(a, 2.0, 0.3)
    assert abs(a_bar - math.exp(0.3 * a)) < 1e-12
    expected = 0.6 if a == 0 else 2.0 * math.expm1(0.3 * a) / a
    assert abs(b_bar - expected) < 1e-12


def test_zoh_matches_scipy_cont2discrete():
    a, b, delta = -0.7, 1.3, 0.25
    ad, bd, *_ = cont2discrete((np.array([[a]]), np.array([[b]]), np.array([[1.0]]), np.array([[0.0]])),
                               delta, method="zoh")
    a_bar, b_bar = discretize(a, b, delta)
    assert abs(a_bar - ad[0, 0]) < 1e-12
    assert abs(b_bar - bd[0, 0]) < 1e-12


def test_euler_variant_keeps_a_bar():
    a_bar, b_bar = discretize(-2.0, 3.0, 0.1, method="euler")
    assert a_bar == pytest.approx(math.exp(-0.2))
    assert b_bar == pytest.approx(0.3)


def test_discretize_rejects_bad_arguments():
    with pytest.raises(ValueError, match="delta"):
        discretize(-1.0, 1.0, 0.0)
    with pytest.raises(ValueError, match="method"):
        discretize(-1.0, 1.0, 0.1, method="bilinear")


@pytest.mark.parametrize("delta", [0.5, 0.1, 0.01])
def test_zoh_constant_input_is_exact(delta):
    times, y = sampled_response(-1.0, 1.0, 1.0, delta, int(round(2.0 / delta)))
    np.testing.assert_allclose(y, continuous_response(-1.0, 1.0, 1.0, times), atol=1e-12)


def test_zoh_error_shrinks_linearly_with_step():
    def error(delta):
        times, y = sampled_response(-1.0, 1.0, 1.0, delta, int(round(2.0 / delta)), u="sin", omega=2.0)
        return np.abs(y - continuous_response(-1.0, 1.0, 1.0, times, u="sin", omega=2.0)).max()
    ratio = error(0.01) / error(0.001)
    assert 8.0 <= ratio <= 12.0


def test_continuous_response_rejects_unknown_input():
    with pytest.raises(ValueError):
        continuous_response(-1.0, 1.0, 1.0, [0.1], u="square")


# ------------------------ kernels ------------------------
def test_sequential_matches_hand_recurrence():
    x = np.array([[[1.0, 2.0, -1.0]]])
    delta = np.full((1, 1, 3), math.log(2.0))
    a = np.array([[-1.0]])
    b = np.ones((1, 1, 3))
    c = np.full((1, 1, 3), 2.0)
    d = np.array([0.5])
    y = selective_scan_sequential(x, delta, a, b, c, d).y[0, 0]
    h1 = 0.5 * 1.0
    h2 = 0.5 * h1 + 0.5 * 2.0
    h3 = 0.5 * h2 + 0.5 * -1.0
    np.testing.assert_allclose(y, [2 * h1 + 0.5, 2 * h2 + 1.0, 2 * h3 - 0.5], atol=1e-12)


def test_parallel_matches_sequential_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(25):
        B, D, N = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 17)
        L = int(rng.integers(1, 300))
        args = _scan_inputs(rng, B, D, N, L)
        chunk = int(rng.integers(1, 40))
        seq = selective_scan_sequential(*args).y
        par = selective_scan_parallel(*args, chunk=chunk, workers=int(rng.integers(1, 5))).y
        assert _close(par, seq, 1e-5)


@pytest.mark.slow
def test_parallel_matches_sequential_oracle_sweep():
    rng = np.random.default_rng(11)
    for _ in range(200):
        B, D, N = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 17)
        L = int(rng.integers(1, 4097))
        args = _scan_inputs(rng, B, D, N, L)
        seq = selective_scan_sequential(*args).y
        par = selective_scan_parallel(*args, chunk=64, workers=4).y
        assert _close(par, seq, 1e-5)


def test_parallel_result_independent_of_workers(rng):
    args = _scan_inputs(rng, 2, 6, 4, 100)
    one = selective_scan_parallel(*args, chunk=16, workers=1).y
    three = selective_scan_parallel(*args, chunk=16, workers=3).y
    np.testing.assert_array_equal(one, three)


def test_chunk_covering_sequence_is_sequential(rng):
    args = _scan_inputs(rng, 1, 2, 3, 10)
    np.testing.assert_array_equal(selective_scan_parallel(*args, chunk=10).y, selective_scan_sequential(*args).y)
    with pytest.raises(ValueError, match="chunk"):
        selective_scan_parallel(*args, chunk=0)


def test_length_one_sequence(rng):
    args = _scan_inputs(rng, 1, 3, 2, 1)
    assert selective_scan_parallel(*args, chunk=4).y.shape == (1, 3, 1)


def test_pure_skip_path_when_c_is_zero(rng):
    x, delta, a, b, c, d = _scan_inputs(rng, 2, 3, 4, 17, dtype=np.float64)
    c = np.zeros_like(c)
    y = selective_scan_sequential(x, delta, a, b, c, d).y
    np.testing.assert_array_equal(y, d[None, :, None] * x)
    grad_out = rng.standard_normal(x.shape)
    states = selective_scan_sequential(x, delta, a, b, c, d).states
    grads = scan_backward(grad_out, ssm.ScanSaved.capture(x, delta, a, b, c, d, states=states))
    np.testing.assert_array_equal(grads.x, d[None, :, None] * grad_out)


def _one_state(a, delta, x):
    L = len(x)
    return (np.asarray(x, dtype=float).reshape(1, 1, L), np.full((1, 1, L), delta), np.array([[a]]),
            np.ones((1, 1, L)), np.ones((1, 1, L)), np.zeros(1))


def test_halving_decay_example():
    y = selective_scan_sequential(*_one_state(-1.0, math.log(2.0), [1.0, 1.0, 1.0])).y[0, 0]
    np.testing.assert_allclose(y, [0.5, 0.75, 0.875], atol=1e-12)


def test_integrator_limit_gives_prefix_sums():
    y = selective_scan_sequential(*_one_state(0.0, 1.0, [1.0, 2.0, 3.0])).y[0, 0]
    np.testing.assert_array_equal(y, [1.0, 3.0, 6.0])


def test_combine_is_associative(rng):
    e1, e2, e3 = [(rng.uniform(0, 1, 16), rng.standard_normal(16)) for _ in range(3)]
    left = ssm.combine(ssm.combine(e3, e2), e1)
    right = ssm.combine(e3, ssm.combine(e2, e1))
    for l, r in zip(left, right):
        np.testing.assert_allclose(l, r, rtol=1e-6, atol=1e-12)


def test_long_sequence_stays_bounded():
    rng = np.random.default_rng(21)
    L = 65536
    x = rng.uniform(-1, 1, (1, 2, L))
    delta = rng.uniform(0.01, 0.5, (1, 2, L))
    a = -rng.uniform(0.5, 2.0, (2, 2))
    b = rng.uniform(-1, 1, (1, 2, L))
    c = rng.uniform(-1, 1, (1, 2, L))
    d = np.ones(2)
    seq = selective_scan_sequential(x, delta, a, b, c, d)
    a_bar, u = ssm._inputs(x, delta, a, b)
    bound = np.abs(u).max() / (1 - a_bar.max())
    assert np.all(np.isfinite(seq.y))
    assert np.abs(seq.states).max() <= bound * (1 + 1e-9)
    par = selective_scan_parallel(x, delta, a, b, c, d, chunk=1024, workers=2)
    assert np.all(np.isfinite(par.y))
    np.testing.assert_allclose(par.y, seq.y, rtol=1e-8, atol=1e-10)


def test_backward_of_single_step_by_hand():
    xv, dv, av, bv, cv, skip = 2.0, 0.3, -0.8, 1.5, -0.7, 0.4
    args = (np.array([[[xv]]]), np.array([[[dv]]]), np.array([[av]]),
            np.array([[[bv]]]), np.array([[[cv]]]), np.array([skip]))
    states = selective_scan_sequential(*args).states
    grads = scan_backward(np.ones((1, 1, 1)), ssm.ScanSaved.capture(*args, states=states))
    da = dv * av
    gain = math.expm1(da) / av
    assert grads.x.item() == pytest.approx(cv * gain * bv + skip, rel=1e-12)
    assert grads.b.item() == pytest.approx(cv * gain * xv, rel=1e-12)
    assert grads.c.item() == pytest.approx(gain * bv * xv, rel=1e-12)
    assert grads.d.item() == pytest.approx(xv, rel=1e-12)
    assert grads.delta.item() == pytest.approx(cv * bv * xv * math.exp(da), rel=1e-12)
    dgain_da = (da * math.exp(da) - math.expm1(da)) / (av * av)
    assert grads.a.item() == pytest.approx(cv * bv * xv * dgain_da, rel=1e-10)


def test_scan_validation():
    x = np.zeros((1, 2, 0))
    with pytest.raises(ValueError, match="length"):
        selective_scan_sequential(x, x, np.zeros((2, 1)), np.zeros((1, 1, 0)), np.zeros((1, 1, 0)), np.zeros(2))
    rng = np.random.default_rng(0)
    x, delta, a, b, c, d = _scan_inputs(rng, 1, 2, 3, 5)
    with pytest.raises(nx.ShapeError):
        selective_scan_sequential(x, delta, a[:1], b, c, d)
    with pytest.raises(ValueError, match="positive"):
        selective_scan_sequential(x, -delta, a, b, c, d)


def test_resume_equals_full_scan(rng):
    x, delta, a, b, c, d = _scan_inputs(rng, 2, 3, 4, 20, dtype=np.float64)
    full = selective_scan_sequential(x, delta, a, b, c, d).y
    y1, state = scan_resume(x[..., :7], delta[..., :7], a, b[..., :7], c[..., :7], d)
    y2, state = scan_resume(x[..., 7:], delta[..., 7:], a, b[..., 7:], c[..., 7:], d, state)
    assert state.position == 20
    np.testing.assert_allclose(np.concatenate([y1, y2], axis=-1), full, atol=1e-12)


def test_selective_scan_is_order_sensitive():
    rng = np.random.default_rng(3)
    params = SsmParams(4, d_state=3, rng=rng)
    x = rng.standard_normal((1, 4, 12))
    with nx.default_dtype(np.float64), nx.no_grad():
        y = params(Tensor(x)).data
        y_rev = params(Tensor(x[..., ::-1].copy())).data[..., ::-1]
    assert not np.allclose(y, y_rev)


def test_ssm_params_layout_and_shape_check():
    params = SsmParams(5, d_state=3)
    np.testing.assert_allclose(params.a_matrix().data[0], [-1.0, -2.0, -3.0], rtol=1e-6)
    assert params.param_count() == 5 * 3 + 2 * 3 * 5 + 5 * 5 + 5 + 5
    with pytest.raises(nx.ShapeError):
        params(Tensor(np.zeros((1, 4, 6))))
    system = params.discrete(Tensor(np.zeros((1, 5, 6))))
    assert system.a_bar.shape == (1, 5, 3, 6)
    assert np.all((system.a_bar > 0) & (system.a_bar < 1))


# ------------------------ gradients ------------------------
@pytest.mark.parametrize("op", ["selective_scan", "selective_scan_parallel", "ssm"])
def test_scan_gradcheck(op):
    report = nx.grad_check(op)
    assert report.passed(1e-4), report.per_param


def test_scan_gradcheck_near_zero_a():
    rng = np.random.default_rng(5)
    fn, inputs = nx.GRADCHECK_CASES["selective_scan"].build(rng, (1, 2, 2, 6))
    inputs["a"] = np.array([[-1e-7, -0.5], [-2e-5, -1.0]])
    with nx.default_dtype(np.float64):
        leaves = [Tensor(v, requires_grad=True) for v in inputs.values()]
        out = fn(*leaves)
        loss = nx.sum(out)
        analytic = nx.backward(nx.Graph.trace(loss), loss, leaves)
    h = 1e-6
    names = list(inputs)
    k = names.index("a")
    for i in range(inputs["a"].size):
        plus = {n: v.copy() for n, v in inputs.items()}
        minus = {n: v.copy() for n, v in inputs.items()}
        plus["a"].reshape(-1)[i] += h
        minus["a"].reshape(-1)[i] -= h
        with nx.default_dtype(np.float64), nx.no_grad():
            fp = fn(*[Tensor(v) for v in plus.values()]).data.sum()
            fm = fn(*[Tensor(v) for v in minus.values()]).data.sum()
        numeric = (fp - fm) / (2 * h)
        assert analytic[k].reshape(-1)[i] == pytest.approx(numeric, rel=1e-5, abs=1e-7)


def test_checkpointed_backward_matches_full_storage(monkeypatch):
    rng = np.random.default_rng(9)
    args = _scan_inputs(rng, 1, 2, 3, 13, dtype=np.float64)
    grad_out = rng.standard_normal((1, 2, 13))
    states = selective_scan_sequential(*args).states
    full = scan_backward(grad_out, ssm.ScanSaved.capture(*args, states=states))
    monkeypatch.setattr(ssm, "FULL_STORAGE_MAX", 4)
    monkeypatch.setattr(ssm, "CHECKPOINT_STRIDE", 5)
    saved = ssm.ScanSaved.capture(*args, states=states)
    assert saved.states is None and len(saved.checkpoints) == 3
    chunked = scan_backward(grad_out, saved)
    for name in ("x", "delta", "a", "b", "c", "d"):
        np.testing.assert_allclose(getattr(chunked, name), getattr(full, name), rtol=1e-10, atol=1e-12)


def test_scan_backward_requires_saved_state():
    with pytest.raises(ValueError, match="saved"):
        scan_backward(np.zeros((1, 1, 1)), None)


# ------------------------ benchmark ------------------------
def test_bench_rows_and_csv():
    rows = ssm.bench_scan([16, 32], D=2, N=2, kernel="parallel", repeats=2, chunk=8, workers=2)
    assert [r.L for r in rows] == [16, 32]
    assert all(r.median_ns > 0 and r.throughput > 0 for r in rows)
    buf = io.StringIO()
    ssm.write_bench_csv(rows, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == ",".join(ssm.BENCH_CSV_HEADER)
    assert lines[1].startswith("parallel,16,2,2,")
    with pytest.raises(ValueError):
        ssm.bench_scan(8, D=1, N=1, kernel="fft")


@pytest.mark.slow
def test_sequential_runtime_scales_linearly():
    lengths = [2 ** k for k in range(12, 17)]
    rows = ssm.bench_scan(lengths, D=8, N=8, kernel="sequential", repeats=5)
    for prev, cur in zip(rows, rows[1:]):
        assert 1.6 <= cur.median_ns / prev.median_ns <= 2.6


@pytest.mark.slow
def test_parallel_not_slower_at_4096():
    seq = ssm.bench_scan(4096, D=16, N=16, kernel="sequential", repeats=5)[0]
    par = ssm.bench_scan(4096, D=16, N=16, kernel="parallel", repeats=5, workers=4)[0]
    assert par.median_ns <= seq.median_ns

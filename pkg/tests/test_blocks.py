import numpy as np
import pytest

import numerics as nx
from blocks import (
    AbmlpBlock,
    FrmBranch,
    VssModule,
    VssVariant,
    abmlp_forward,
    vss_branches,
    vss_forward,
)
from numerics import Tensor
from oss2d import Direction


def test_abmlp_weights_lie_in_unit_interval(rng):
    block = AbmlpBlock(8, rng=rng)
    w = block.weights(Tensor(rng.standard_normal((3, 8, 4, 4)) * 10)).data
    assert w.shape == (3, 8, 1, 1)
    assert np.all((w > 0) & (w < 1))


def test_abmlp_with_zeroed_last_layer_halves_input(rng):
    block = AbmlpBlock(8, rng=rng)
    block.fc3.weight.data[:] = 0.0
    block.fc3.bias.data[:] = 0.0
    x = Tensor(rng.standard_normal((2, 8, 3, 3)))
    np.testing.assert_array_equal(abmlp_forward(x, block).data, 0.5 * x.data)


def test_abmlp_hidden_width_uses_reduction():
    assert AbmlpBlock(16).fc1.weight.shape == (4, 16)
    assert AbmlpBlock(2).fc1.weight.shape == (1, 2)


def test_abmlp_rejects_wrong_channels(rng):
    with pytest.raises(nx.ShapeError, match="axis 1"):
        abmlp_forward(Tensor(np.zeros((1, 4, 2, 2))), AbmlpBlock(8, rng=rng))


def test_frm_keeps_shape_and_needs_even_channels(rng):
    branch = FrmBranch(6, rng=rng)
    assert branch(Tensor(rng.standard_normal((1, 6, 5, 5)))).shape == (1, 6, 5, 5)
    with pytest.raises(ValueError, match="even"):
        FrmBranch(5)


def test_vss2_with_zero_fuse_is_identity(rng):
    module = VssModule(8, VssVariant.VSS2, d_state=2, rng=rng)
    module.fuse.weight.data[:] = 0.0
    module.fuse.bias.data[:] = 0.0
    x = Tensor(rng.standard_normal((1, 8, 4, 4)))
    np.testing.assert_array_equal(vss_forward(x, module).data, x.data)


def test_vss1_halves_channels(rng):
    module = VssModule(8, VssVariant.VSS1, d_state=2, directions=(Direction.H_FWD,), rng=rng)
    assert module.out_channels == 4
    assert vss_forward(Tensor(rng.standard_normal((2, 8, 3, 5))), module).shape == (2, 4, 3, 5)


def test_vss_branches_each_see_half_the_channels(rng):
    module = VssModule(8, d_state=2, directions=(Direction.V_REV,), rng=rng)
    frm_out, oss_out = vss_branches(Tensor(rng.standard_normal((1, 8, 2, 3))), module)
    assert frm_out.shape == oss_out.shape == (1, 4, 2, 3)


def test_vss_rejects_odd_and_mismatched_channels(rng):
    with pytest.raises(ValueError, match="even"):
        VssModule(7)
    module = VssModule(4, d_state=2, directions=(Direction.H_FWD,), rng=rng)
    with pytest.raises(nx.ShapeError):
        vss_forward(Tensor(np.zeros((1, 6, 2, 2))), module)


def test_vss_variant_parses_from_text():
    assert VssModule(4, "vss1", d_state=2, directions=(Direction.H_FWD,)).variant is VssVariant.VSS1


@pytest.mark.parametrize("case", ["abmlp", "frm", "vss2", "vss1"])
def test_block_gradcheck(case):
    report = nx.grad_check(case)
    assert report.passed(1e-4), report.per_param


def test_abmlp_matches_step_by_step(rng, float64):
    block = AbmlpBlock(8, rng=rng)
    x = rng.standard_normal((2, 8, 3, 4))
    out = abmlp_forward(Tensor(x), block).data

    def dense(layer, v):
        return v @ layer.weight.data.T + layer.bias.data
    pooled = x.mean(axis=(2, 3))
    hidden = np.maximum(dense(block.fc1, pooled), 0.0)
    hidden = np.maximum(dense(block.fc2, hidden), 0.0)
    weights = 1.0 / (1.0 + np.exp(-dense(block.fc3, hidden)))
    np.testing.assert_allclose(out, x * weights[:, :, None, None], rtol=1e-12, atol=1e-12)
    assert np.all(np.abs(out) <= np.abs(x))


def test_frm_of_zero_input_is_the_restore_bias(rng):
    branch = FrmBranch(6, rng=rng)
    out = branch(Tensor(np.zeros((2, 6, 3, 5)))).data
    expected = np.broadcast_to(branch.restore.bias.data[None, :, None, None], out.shape)
    np.testing.assert_array_equal(out, expected)


def test_each_branch_ignores_the_other_half(rng):
    module = VssModule(8, VssVariant.VSS2, d_state=2, directions=(Direction.H_FWD, Direction.V_REV), rng=rng)
    x = rng.standard_normal((1, 8, 3, 3))
    frm, oss = vss_branches(Tensor(x), module)
    changed_second = x.copy()
    changed_second[:, 4:] += rng.standard_normal((1, 4, 3, 3))
    frm2, oss2 = vss_branches(Tensor(changed_second), module)
    np.testing.assert_array_equal(frm2.data, frm.data)
    assert not np.allclose(oss2.data, oss.data)
    changed_first = x.copy()
    changed_first[:, :4] += rng.standard_normal((1, 4, 3, 3))
    frm3, oss3 = vss_branches(Tensor(changed_first), module)
    np.testing.assert_array_equal(oss3.data, oss.data)
    assert not np.allclose(frm3.data, frm.data)


@pytest.mark.parametrize("channels,grid", [(16, 8), (32, 4), (64, 2)])
def test_vss2_keeps_pyramid_shapes(rng, channels, grid):
    module = VssModule(channels, VssVariant.VSS2, d_state=2, rng=rng)
    with nx.no_grad():
        out = module(Tensor(rng.standard_normal((1, channels, grid, grid))))
    assert out.shape == (1, channels, grid, grid)


@pytest.mark.slow
@pytest.mark.parametrize("channels,grid", [(128, 40), (256, 20), (512, 10)])
def test_vss2_keeps_reference_pyramid_shapes(rng, channels, grid):
    module = VssModule(channels, VssVariant.VSS2, d_state=16, directions=(Direction.H_FWD,), rng=rng)
    with nx.no_grad():
        out = module(Tensor(rng.standard_normal((1, channels, grid, grid)).astype(np.float32)))
    assert out.shape == (1, channels, grid, grid)

"""
Unit tests for tiled functional emulation.
"""

import numpy as np
import pytest

from emulator import (
    EmulationResult,
    LayerCheck,
    apply_padding,
    apply_write_plan,
    emulate_network,
    pack_blocks,
)
from error_handling import InvariantViolation
from tiling import tile_layer, write_plan
from tests.conftest import toy_net

CHAIN = [
    {'id': 'conv1', 'kind': 'CONV', 'kernel': 3, 'padding': 1, 'out_channels': 4},
    {'id': 'conv2', 'kind': 'CONV', 'kernel': 3, 'padding': 1, 'out_channels': 3},
]


@pytest.mark.unit
class TestWritePlanBuffers:
    """Fragments scatter producer tiles into consumer blocks."""

    @pytest.mark.parametrize('dims_a, dims_b', [
        ((4, 5, 3, 2), (3, 3, 4, 3)),
        ((10, 10, 3, 4), (5, 4, 2, 3)),
        ((3, 7, 1, 3), (10, 10, 4, 1)),
    ])
    def test_scattered_tiles_equal_packed_blocks(self, dims_a, dims_b):
        net = toy_net(x=10, y=10, c=3, layers=CHAIN)
        grid_a = tile_layer(net.layer('conv1'), dims_a)
        grid_b = tile_layer(net.layer('conv2'), dims_b, base_address=4096)
        plan = write_plan(grid_a, grid_b)
        dense = np.random.default_rng(0).standard_normal((4, 10, 10)).astype(np.float32)

        buffer = np.full(grid_b.augmented_bytes // 4, np.nan, dtype=np.float32)
        nx, ny, _, nco = grid_a.counts
        for gco in range(nco):
            co_lo, co_hi = grid_a.co_range(gco)
            for gy in range(ny):
                yt = grid_a.y_tiles[gy]
                for gx in range(nx):
                    xt = grid_a.x_tiles[gx]
                    if xt.out == 0 or yt.out == 0:
                        continue
                    values = dense[co_lo:co_hi, yt.out_lo:yt.out_hi, xt.out_lo:xt.out_hi]
                    apply_write_plan(plan, buffer, (gx, gy, gco), values, (co_lo, yt.out_lo, xt.out_lo))
        apply_padding(plan, buffer)

        np.testing.assert_array_equal(buffer, pack_blocks(grid_b, dense))


@pytest.mark.unit
class TestEmulateNetwork:
    """Tiled execution against the oracle."""

    def test_small_network_with_searched_tiles(self, small_net, profile):
        result = emulate_network(small_net, profile, seed=2)
        assert result.passed(1e-5)
        assert result.checks['conv1'].tiled
        assert result.jobs > 0
        result.require()

    def test_split_channels_and_halos(self, small_net, profile):
        tiling = {'conv1': (6, 5, 2, 3), 'fc1': (6, 5, 3, 5)}
        result = emulate_network(small_net, profile, tiling=tiling, seed=4)
        assert result.tiles == 2 * 2 * 2 * 2 + 2
        assert result.max_relative_error <= 1e-5
        np.testing.assert_allclose(result.outputs['prob'].sum(), 1.0, rtol=1e-5)

    def test_residual_network(self, residual_net, profile):
        tiling = {'conv1': (4, 4, 2, 3), 'conv2': (8, 8, 6, 6), 'conv3': (4, 8, 3, 6), 'branch': (8, 8, 6, 2)}
        result = emulate_network(residual_net, profile, tiling=tiling, seed=1)
        assert result.passed()
        assert {lid for lid, check in result.checks.items() if check.tiled} == {'conv1', 'conv2', 'conv3', 'branch'}

    def test_explicit_inputs_are_used(self, small_net, profile):
        x = np.zeros((3, 10, 12), dtype=np.float32)
        result = emulate_network(small_net, profile, x=x, seed=0)
        np.testing.assert_array_equal(result.outputs['input'], x)
        assert result.passed()

    def test_require_reports_worst_layer(self):
        result = EmulationResult(network='n', outputs={}, reference={})
        result.checks['a'] = LayerCheck('a', 'CONV', max_abs_error=1e-9, max_abs_reference=1.0)
        result.checks['b'] = LayerCheck('b', 'FC', max_abs_error=0.5, max_abs_reference=1.0)
        assert not result.passed()
        with pytest.raises(InvariantViolation, match="'b'"):
            result.require()

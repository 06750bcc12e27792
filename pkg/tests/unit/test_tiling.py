"""
Unit tests for tile geometry, write plans, costs, partitioning and search.
"""

import numpy as np
import pytest

from tiling import (
    Schedule,
    TilingError,
    TilingInfeasibleError,
    WritePlanError,
    bucket_key,
    candidate_sizes,
    check_schedule,
    fusion_map,
    layer_ratio_sweep,
    partition_tile,
    representative_tile,
    schedule_overheads,
    search_tiles,
    split_axis,
    storage_overhead,
    tile_cost,
    tile_layer,
    write_plan,
)
from tests.conftest import toy_net


def chain_net(x=10, y=10, c=4):
    layers = [
        {'id': 'conv1', 'kind': 'CONV', 'kernel': 3, 'padding': 1, 'out_channels': 6},
        {'id': 'conv2', 'kind': 'CONV', 'kernel': 3, 'padding': 1, 'out_channels': 5},
    ]
    return toy_net(name='chain', x=x, y=y, c=c, layers=layers)


def strided_chain(stride):
    """10x10x4 input, a 3x3 convolution of the given stride, then a 3x3 consumer."""
    layers = [
        {'id': 'conv1', 'kind': 'CONV', 'kernel': 3, 'stride': stride, 'padding': 1, 'out_channels': 6},
        {'id': 'conv2', 'kind': 'CONV', 'kernel': 3, 'padding': 1, 'out_channels': 3},
    ]
    return toy_net(name=f'stride{stride}', x=10, y=10, c=4, layers=layers)


def coverage(plan):
    """Write count per byte of the consumer's augmented blocks."""
    target = plan.target
    counts = np.zeros(target.augmented_bytes // 4, dtype=np.int64)
    for fragment in plan.fragments:
        words = (plan.element_addresses(fragment) - target.base_address) // 4
        np.add.at(counts, words, 1)
    return counts


@pytest.mark.unit
class TestAxisSplit:
    """Ownership, halos and padding along one axis."""

    def test_three_by_three_same_padding(self):
        tiles = split_axis(10, 10, 3, 1, 1, 4)
        assert [(t.lo, t.hi) for t in tiles] == [(0, 4), (4, 8), (8, 10)]
        assert [(t.out_lo, t.out_hi) for t in tiles] == [(0, 4), (4, 8), (8, 10)]
        assert [(t.pad_lo, t.pad_hi) for t in tiles] == [(1, 0), (0, 0), (0, 1)]
        assert [(t.halo_lo, t.halo_hi) for t in tiles] == [(0, 1), (1, 1), (1, 0)]
        assert [t.aug for t in tiles] == [6, 6, 4]

    def test_outputs_partitioned(self):
        for size in (1, 2, 3, 5, 7, 16):
            tiles = split_axis(15, 7, 3, 2, 0, size)
            owned = [o for t in tiles for o in range(t.out_lo, t.out_hi)]
            assert owned == list(range(7))

    def test_augmented_range_covers_receptive_field(self):
        kernel, stride, pad = 5, 2, 2
        for tile in split_axis(23, 12, kernel, stride, pad, 6):
            if tile.out == 0:
                continue
            assert tile.aug_lo == tile.out_lo * stride - pad
            assert tile.aug_hi == (tile.out_hi - 1) * stride - pad + kernel

    def test_single_tile_has_no_halo(self):
        (tile,) = split_axis(8, 8, 3, 1, 1, 8)
        assert (tile.halo_lo, tile.halo_hi) == (0, 0)
        assert tile.aug == 10


@pytest.mark.unit
class TestTileGrid:
    """Grids and their DRAM layout."""

    def test_counts_and_layout(self):
        conv = chain_net().layer('conv1')
        grid = tile_layer(conv, (4, 4, 2, 3), base_address=4096)
        assert grid.counts == (3, 3, 2, 2)
        assert grid.augmented_bytes == 16 * 16 * 4 * 4
        assert grid.raw_bytes == 10 * 10 * 4 * 4
        assert grid.end_address == 4096 + grid.augmented_bytes
        blocks = sorted(grid.dram_layout.values())
        assert blocks[0][0] == 4096
        for (address, size), (next_address, _) in zip(blocks, blocks[1:]):
            assert address + size == next_address

    def test_storage_overhead_positive_with_halos(self):
        conv = chain_net().layer('conv1')
        assert storage_overhead(tile_layer(conv, (4, 4, 4, 6))) == pytest.approx(256 / 100 - 1)
        assert storage_overhead(tile_layer(conv, (10, 10, 4, 6))) == pytest.approx(144 / 100 - 1)

    def test_tiles_cover_all_macs(self):
        conv = chain_net().layer('conv1')
        grid = tile_layer(conv, (3, 4, 3, 4))
        assert sum(t.macs for t in grid.iter_tiles()) == 10 * 10 * 9 * 4 * 6

    @pytest.mark.parametrize('dims', [(0, 4, 4, 6), (11, 4, 4, 6), (4, 4, 5, 6), (4, 4, 4, 7), (4, 4, 4)])
    def test_invalid_dims(self, dims):
        with pytest.raises(TilingError):
            tile_layer(chain_net().layer('conv1'), dims)

    def test_fc_needs_full_extent(self, small_net):
        fc = small_net.layer('fc1')
        with pytest.raises(TilingError, match='full spatial extent'):
            tile_layer(fc, (3, 5, 4, 5))
        assert tile_layer(fc, (6, 5, 2, 5)).counts == (1, 1, 2, 1)

    def test_unweighted_layer_rejected(self, small_net):
        with pytest.raises(TilingError):
            tile_layer(small_net.layer('pool1'), (2, 2, 1, 1))

    def test_representative_is_first_tile(self):
        conv = chain_net().layer('conv1')
        rep = representative_tile(conv, (4, 4, 2, 3))
        first = tile_layer(conv, (4, 4, 2, 3)).tile(0, 0, 0, 0)
        assert (rep.t_xo, rep.t_yo, rep.t_ci, rep.t_co, rep.halo, rep.pad) == \
            (first.t_xo, first.t_yo, first.t_ci, first.t_co, first.halo, first.pad)
        assert rep.reloads_partials is True


@pytest.mark.unit
class TestWritePlan:
    """Fragment plans between consecutive grids."""

    @pytest.mark.parametrize('dims1, dims2', [
        ((4, 4, 2, 3), (4, 4, 3, 5)),
        ((3, 5, 4, 2), (6, 2, 4, 5)),
        ((10, 10, 4, 6), (2, 3, 6, 1)),
        ((1, 1, 1, 1), (7, 7, 5, 5)),
    ])
    def test_every_byte_written_once(self, dims1, dims2):
        net = chain_net()
        grid = tile_layer(net.layer('conv1'), dims1)
        target = tile_layer(net.layer('conv2'), dims2, base_address=grid.end_address)
        plan = write_plan(grid, target)
        counts = coverage(plan)
        assert np.all(counts == 1)
        assert plan.total_bytes == target.augmented_bytes
        assert plan.raw_bytes == 10 * 10 * 6 * 4

    def test_fragment_kinds(self):
        net = chain_net()
        plan = write_plan(tile_layer(net.layer('conv1'), (5, 5, 4, 6)),
                          tile_layer(net.layer('conv2'), (5, 5, 6, 5)))
        kinds = {f.kind for f in plan.fragments}
        assert kinds == {'raw', 'A', 'B', 'C', 'pad'}
        assert plan.fragment_bytes > 0
        assert plan.pad_bytes == (4 * 7 * 7 - 4 * 6 * 6) * 6 * 4

    def test_plan_without_consumer_is_dense(self):
        grid = tile_layer(chain_net().layer('conv2'), (3, 3, 2, 2))
        plan = write_plan(grid)
        assert {f.kind for f in plan.fragments} == {'raw'}
        assert plan.total_bytes == 10 * 10 * 5 * 4
        addresses = np.concatenate([plan.element_addresses(f) for f in plan.fragments])
        assert len(np.unique(addresses)) == 10 * 10 * 5
        assert addresses.min() == grid.end_address

    def test_shape_mismatch(self):
        net = chain_net()
        other = chain_net(x=8, y=8, c=6)
        with pytest.raises(WritePlanError):
            write_plan(tile_layer(net.layer('conv1'), (4, 4, 4, 6)),
                       tile_layer(other.layer('conv1'), (4, 4, 6, 6)))

    def test_raw_fragments_of_one_tile(self):
        net = chain_net()
        plan = write_plan(tile_layer(net.layer('conv1'), (10, 10, 4, 6)),
                          tile_layer(net.layer('conv2'), (10, 10, 6, 5)))
        raw = [f for f in plan.for_source(0, 0, 0) if f.kind == 'raw']
        assert len(raw) == 1
        assert raw[0].size_bytes == 10 * 10 * 6 * 4


@pytest.mark.unit
class TestTileCost:
    """Cost model."""

    def test_reads_and_writes(self, profile):
        conv = chain_net().layer('conv1')
        cost = tile_cost(conv, (4, 4, 4, 3), profile)
        coefficients = (9 * 4 * 6 + 6) * 4
        assert cost.read_bytes == 2 * 16 * 16 * 4 * 4 + 9 * coefficients
        assert cost.write_bytes == 10 * 10 * 6 * 4
        assert cost.oi == pytest.approx(2 * 10 * 10 * 9 * 4 * 6 / (cost.read_bytes + cost.write_bytes))
        assert cost.dispatch_units == 3 * 3 * 2
        assert cost.epochs == 2

    def test_writes_follow_consumer_grid(self, profile):
        net = chain_net()
        target = tile_layer(net.layer('conv2'), (4, 4, 6, 5))
        cost = tile_cost(net.layer('conv1'), (4, 4, 4, 6), profile, next_grid=target)
        assert cost.write_bytes == target.augmented_bytes

    def test_footprint_is_double_buffered(self, profile):
        conv = chain_net().layer('conv1')
        cost = tile_cost(conv, (10, 10, 4, 6), profile)
        assert cost.footprint_bytes == 2 * (12 * 12 * 4 + 10 * 10 * 6 + 9 * 4 * 6 + 6) * 4


@pytest.mark.unit
class TestCostAgainstTraces:
    """Estimated traffic matches the DMA read trace and the write plan."""

    @pytest.mark.parametrize('stride,dims', [
        (1, (4, 4, 4, 3)),
        (1, (3, 7, 2, 6)),
        (1, (1, 1, 4, 6)),
        (2, (2, 2, 4, 3)),
        (2, (1, 1, 4, 6)),
        (2, (1, 10, 4, 6)),
        (2, (3, 1, 2, 4)),
    ])
    @pytest.mark.parametrize('tiled_consumer', [False, True])
    def test_traffic_and_units(self, profile, stride, dims, tiled_consumer):
        net = strided_chain(stride)
        conv, consumer = net.layer('conv1'), net.layer('conv2')
        grid = tile_layer(conv, dims)
        target = tile_layer(consumer, (2, 3, 6, 3), base_address=grid.end_address) if tiled_consumer else None
        cost = tile_cost(conv, dims, profile, next_grid=target)
        plan = write_plan(grid, target)

        trace = list(grid.read_trace())
        assert cost.read_bytes == sum(size for _, _, _, size in trace)
        assert cost.dispatch_units == len({unit for unit, _, _, _ in trace})
        assert cost.write_bytes == plan.total_bytes
        assert cost.oi == pytest.approx(2 * conv.out_shape.elements * 9 * 4 / (cost.read_bytes + plan.total_bytes))
        assert cost.halo_bytes >= 0

    def test_tiles_below_stride_are_not_priced(self, profile):
        conv = strided_chain(2).layer('conv1')
        cost = tile_cost(conv, (1, 1, 4, 6), profile)
        assert cost.dispatch_units == 5 * 5
        assert cost.read_bytes == 25800


@pytest.mark.unit
class TestPartition:
    """Distribution of output elements over NSTs."""

    def test_round_robin_order(self):
        tile = representative_tile(chain_net().layer('conv1'), (4, 4, 4, 2))
        jobs = partition_tile(tile, 8)
        assert len(jobs) == tile.output_units
        assert [(j.xo, j.yo, j.co) for j in jobs[:5]] == [(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0), (0, 1, 0)]
        assert all(j.nst == i % 8 and j.batch == i // 8 for i, j in enumerate(jobs))
        assert not any(j.reduction for j in jobs)

    def test_small_tile_splits_input_channels(self, small_net):
        tile = representative_tile(small_net.layer('fc1'), (6, 5, 4, 2))
        jobs = partition_tile(tile, 8)
        assert tile.output_units == 2
        assert len(jobs) == 8
        assert all(j.reduction for j in jobs)
        per_output = {}
        for job in jobs:
            per_output.setdefault(job.co, []).append((job.ci_lo, job.ci_hi))
        for ranges in per_output.values():
            assert sorted(ranges) == [(0, 1), (1, 2), (2, 3), (3, 4)]

    def test_invalid_nst_count(self):
        tile = representative_tile(chain_net().layer('conv1'), (4, 4, 4, 2))
        with pytest.raises(TilingError):
            partition_tile(tile, 0)


@pytest.mark.unit
class TestSearch:
    """Tile search over networks."""

    def test_candidate_sizes(self):
        assert candidate_sizes(12) == [1, 2, 3, 4, 6, 8, 12]
        assert candidate_sizes(7) == [1, 2, 4, 7]

    def test_bucket_key(self, small_net):
        conv = small_net.layer('conv1')
        assert bucket_key(conv, (4, 4, 3, 4), 2.0) == '3x3s1|L16|BF2'
        assert bucket_key(small_net.layer('fc1'), (6, 5, 4, 5), 0.5) == 'fc|L64|BF0.5'

    def test_search_fits_spm(self, small_net, profile):
        schedule = search_tiles(small_net, profile)
        assert set(schedule.layers) == {'conv1', 'fc1'}
        for entry in schedule.layers.values():
            assert entry.cost.footprint_bytes <= profile.cluster.spm_bytes
        assert schedule.layers['fc1'].dims[:2] == (6, 5)
        assert schedule.fused == {'relu1': 'conv1', 'pool1': 'conv1'}

    def test_identical_signatures_share_dims(self, profile):
        layers = [
            {'id': 'a', 'kind': 'CONV', 'kernel': 3, 'padding': 1, 'out_channels': 4},
            {'id': 'b', 'kind': 'CONV', 'kernel': 3, 'padding': 1, 'out_channels': 4},
        ]
        net = toy_net(x=16, y=16, c=4, layers=layers)
        schedule = search_tiles(net, profile)
        assert schedule.layers['a'].dims == schedule.layers['b'].dims

    def test_tiny_spm_is_infeasible(self, small_net, profile):
        with pytest.raises(TilingInfeasibleError) as excinfo:
            search_tiles(small_net, profile, spm_bytes=128)
        assert excinfo.value.exit_code == 2
        assert set(excinfo.value.failures) == {"conv1", "fc1"}

    def test_schedule_round_trip(self, small_net, profile, tmp_path):
        schedule = search_tiles(small_net, profile)
        path = tmp_path / 'schedule.json'
        schedule.save(str(path))
        loaded = Schedule.load(str(path))
        assert loaded.to_dict() == schedule.to_dict()

    def test_fusion_through_activations(self, residual_net):
        fused = fusion_map(residual_net)
        assert fused['relu1'] == 'conv1'
        assert fused['relu2'] == 'add'
        assert 'pool' not in fused

    def test_overheads_of_toy(self, residual_net, profile):
        schedule = search_tiles(residual_net, profile)
        overheads = schedule_overheads(residual_net, schedule)
        assert overheads.read_bytes > 0
        assert overheads.storage_overhead >= 0
        assert 0 <= overheads.halo_read_overhead < 1

    def test_search_result_passes_check(self, small_net, profile):
        schedule = search_tiles(small_net, profile)
        assert check_schedule(small_net, schedule, profile.cluster.spm_bytes) == []

    def test_check_reports_footprint_and_missing_layer(self, small_net, profile):
        schedule = search_tiles(small_net, profile)
        tight = schedule.layers['conv1'].cost.footprint_bytes - 1
        del schedule.layers['fc1']
        problems = check_schedule(small_net, schedule, tight)
        assert "layer 'fc1' is not scheduled" in problems
        assert any(p.startswith("layer 'conv1' needs") and f"{tight} B" in p for p in problems)

    def test_check_reports_shape_mismatch(self, small_net, profile):
        schedule = search_tiles(small_net, profile)
        other = toy_net(x=16, y=16)
        problems = check_schedule(other, schedule, profile.cluster.spm_bytes)
        assert any("'conv1' was scheduled for" in p for p in problems)


@pytest.mark.unit
class TestRatioSweep:
    """OI and estimated cycles over (T_Ci, T_Co) at fixed spatial dims."""

    def test_covers_every_channel_pair(self, small_net, profile):
        rows = layer_ratio_sweep(small_net.layer('conv1'), profile, 4, 4)
        assert [(r['t_ci'], r['t_co']) for r in rows] == [
            (ci, co) for ci in candidate_sizes(3) for co in candidate_sizes(4)]
        for row in rows:
            assert row['r_tcl'] == pytest.approx(row['t_co'] / row['t_ci'])
            assert row['feasible']

    def test_oi_grows_with_output_slice(self, small_net, profile):
        rows = layer_ratio_sweep(small_net.layer('conv1'), profile, 4, 4)
        for t_ci in candidate_sizes(3):
            oi = [r['oi'] for r in rows if r['t_ci'] == t_ci]
            assert oi == sorted(oi)
            assert oi[-1] > oi[0]

    def test_input_slice_leaves_traffic_unchanged(self, small_net, profile):
        rows = layer_ratio_sweep(small_net.layer('conv1'), profile, 4, 4)
        for t_co in candidate_sizes(4):
            oi = {r['oi'] for r in rows if r['t_co'] == t_co}
            assert len(oi) == 1

    def test_fc_needs_full_extent(self, small_net, profile):
        with pytest.raises(TilingError, match='full spatial extent'):
            layer_ratio_sweep(small_net.layer('fc1'), profile, 2, 2)

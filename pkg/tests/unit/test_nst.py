"""
Unit tests for the NeuroStream functional model.
"""

import numpy as np
import pytest

from nst import (
    CommandKind,
    NeuroStream,
    NstCommand,
    NstConfig,
    NstFault,
    SpmImage,
    agu_addresses,
    agu_addresses_loop,
    plan_spm_layout,
)


def configure(nst, **kwargs):
    nst.submit(NstCommand(CommandKind.MEM_WRITE_CFG, config=NstConfig(**kwargs)))


@pytest.mark.unit
class TestAgu:
    """Address generation."""

    @pytest.mark.parametrize('base, steps, loops', [
        (0, (1, 0, 0), (4, 1, 1)),
        (16, (1, 12, 144), (3, 3, 4)),
        (8, (2, 7, 0), (5, 2, 3)),
        (0, (0, 0, 1), (2, 2, 2)),
    ])
    def test_closed_form_matches_incremental(self, base, steps, loops):
        assert agu_addresses(base, steps, loops).tolist() == agu_addresses_loop(base, steps, loops)

    def test_innermost_loop_runs_fastest(self):
        assert agu_addresses(0, (1, 10, 100), (2, 2, 1)).tolist() == [0, 4, 40, 44]

    def test_zero_loop_bound_rejected(self):
        with pytest.raises(NstFault):
            NstConfig(loops=(0, 1, 1))


@pytest.mark.unit
class TestSpmImage:
    """Scratchpad access checks."""

    def test_size_must_fill_banks(self):
        with pytest.raises(NstFault):
            SpmImage(60, 4)

    def test_word_interleaved_banks(self):
        spm = SpmImage(64, 4)
        assert spm.bank(16) == 0
        assert spm.bank(20) == 1
        assert spm.bank_histogram([0, 4, 16, 32]).tolist() == [3, 1, 0, 0]

    def test_unaligned_read(self):
        spm = SpmImage(64, 4)
        with pytest.raises(NstFault, match='Unaligned'):
            spm.read([6])

    def test_out_of_range_write(self):
        spm = SpmImage(64, 4)
        with pytest.raises(NstFault, match='outside SPM'):
            spm.write([64], [1.0])

    def test_load_and_dump(self):
        spm = SpmImage(64, 4)
        spm.load(8, np.array([1.0, 2.0, 3.0]))
        assert spm.dump(8, 3).tolist() == [1.0, 2.0, 3.0]
        with pytest.raises(NstFault):
            spm.load(56, np.ones(3))


@pytest.mark.unit
class TestCommands:
    """Command semantics."""

    @pytest.fixture
    def spm(self):
        return SpmImage(128, 4)

    def test_stream_mac_accumulates_from_init(self, spm):
        spm.load(0, np.array([1.0, 2.0, 3.0, 4.0]))
        spm.load(16, np.ones(4))
        nst = NeuroStream(spm)
        configure(nst, agu0_base=0, agu1_base=16, loops=(4, 1, 1), acc_init=0.5)
        nst.submit(NstCommand(CommandKind.STREAM_MAC))
        assert float(nst.acc) == pytest.approx(10.5)
        nst.submit(NstCommand(CommandKind.MEM_STORE_ACC, address=32))
        assert float(spm.words[8]) == pytest.approx(10.5)

    def test_single_ops_and_load_acc(self, spm):
        spm.load(0, np.array([3.0, 2.0]))
        nst = NeuroStream(spm)
        nst.submit(
            NstCommand(CommandKind.MEM_LOAD_ACC, address=0),
            NstCommand(CommandKind.SINGLE_MUL, address=4),
            NstCommand(CommandKind.SINGLE_ADD, address=0),
        )
        assert float(nst.acc) == pytest.approx(9.0)

    def test_stream_maxpl(self, spm):
        spm.load(0, np.array([1.0, 5.0, 3.0, 2.0, 7.0, 0.0, 4.0, 4.0]))
        nst = NeuroStream(spm)
        configure(nst, agu0_base=0, agu0_steps=(1, 2, 4), agu1_base=64, agu1_steps=(0, 0, 1),
                  loops=(2, 2, 2))
        nst.submit(NstCommand(CommandKind.STREAM_MAXPL))
        assert spm.dump(64, 2).tolist() == [5.0, 7.0]

    def test_stream_max_is_relu(self, spm):
        spm.load(0, np.array([-1.0, 2.0, -3.0]))
        nst = NeuroStream(spm)
        configure(nst, loops=(3, 1, 1))
        nst.submit(NstCommand(CommandKind.STREAM_MAX, operand=0.0))
        assert spm.dump(0, 3).tolist() == [0.0, 2.0, 0.0]

    def test_stream_sum_and_shift(self, spm):
        spm.load(0, np.array([1.0, 2.0]))
        spm.load(32, np.array([10.0, 20.0]))
        nst = NeuroStream(spm)
        configure(nst, agu1_base=32, loops=(2, 1, 1))
        nst.submit(NstCommand(CommandKind.STREAM_SUM), NstCommand(CommandKind.STREAM_SHIFT, operand=1))
        assert spm.dump(0, 2).tolist() == [22.0, 44.0]

    def test_write_cfg_requires_config(self, spm):
        nst = NeuroStream(spm)
        with pytest.raises(NstFault):
            nst.submit(NstCommand(CommandKind.MEM_WRITE_CFG))

    def test_stream_outside_spm_is_recorded(self, spm):
        nst = NeuroStream(spm, nst_id=3)
        configure(nst, agu0_base=120, loops=(4, 1, 1))
        with pytest.raises(NstFault):
            nst.submit(NstCommand(CommandKind.STREAM_MAC))
        assert nst.faults and nst.faults[0].startswith('NST 3 STREAM_MAC')


@pytest.mark.unit
class TestQueue:
    """Bounded command FIFO."""

    def test_full_queue_rejects_and_counts_stall(self):
        nst = NeuroStream(SpmImage(64, 4), queue_depth=2)
        command = NstCommand(CommandKind.MEM_LOAD_ACC, address=0)
        assert nst.issue(command)
        assert nst.issue(command)
        assert not nst.issue(command)
        assert nst.stalls == 1
        assert nst.depth == 2
        nst.run()
        assert nst.executed == 2
        assert nst.depth == 0

    def test_submit_retries_until_accepted(self):
        nst = NeuroStream(SpmImage(64, 4), queue_depth=1)
        command = NstCommand(CommandKind.MEM_LOAD_ACC, address=0)
        nst.submit(command, command, command)
        assert nst.executed == 3
        assert nst.step() is None


@pytest.mark.unit
class TestSpmLayout:
    """Bank-aware tile placement."""

    def test_pitches_and_regions(self):
        layout = plan_spm_layout(10, 10, 2, 2, 8, 8, (3, 3), (1, 1), n_banks=32, n_nst=8)
        assert layout.row_pitch == 35
        assert layout.row_pitch % 32 == 3
        assert layout.plane_pitch >= layout.row_pitch * 10
        assert layout.plane_pitch % 32 == (3 * layout.row_pitch) % 32
        assert layout.skew == 13
        assert layout.coef_base >= layout.plane_pitch * 2
        assert layout.coef_base % 32 == (-13) % 32
        assert layout.out_base == layout.coef_base + 9 * 2 * 2
        assert layout.end == layout.out_base + 2 * 8 * 8
        assert layout.end_bytes == layout.end * 4

    def test_offsets_do_not_overlap(self):
        layout = plan_spm_layout(6, 6, 3, 2, 4, 4, (3, 3), (1, 1), n_banks=8, n_nst=2)
        last_data = layout.data_offset(2, 5, 5)
        assert last_data < layout.coef_base
        assert layout.coef_offset(1, 2, 2, 2) < layout.out_base
        assert layout.out_offset(1, 3, 3) == layout.end - 1

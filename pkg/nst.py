"""
Functional model of the NeuroStream (NST) coprocessor.

An NST owns a FIFO command queue, three hardware loops, two address
generation units (AGUs) and an FP32 accumulator. Commands stream operands
out of the cluster scratchpad (SPM), which is modelled as a word-interleaved
array of FP32 elements. Values are computed exactly as the hardware would in
single precision; timing lives in clustersim.
"""

import logging
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Deque, List, Optional, Tuple

import numpy as np

from error_handling import InvariantViolation

logger = logging.getLogger(__name__)

WORD_BYTES = 4


class NstFault(InvariantViolation):
    """Raised when an NST stream leaves the SPM or reads unaligned words."""
    pass


class CommandKind(str, Enum):
    STREAM_MAC = 'STREAM_MAC'
    STREAM_SUM = 'STREAM_SUM'
    STREAM_MAX = 'STREAM_MAX'
    STREAM_MIN = 'STREAM_MIN'
    STREAM_SCALE = 'STREAM_SCALE'
    STREAM_SHIFT = 'STREAM_SHIFT'
    STREAM_MAXPL = 'STREAM_MAXPL'
    SINGLE_ADD = 'SINGLE_ADD'
    SINGLE_MUL = 'SINGLE_MUL'
    MEM_LOAD_ACC = 'MEM_LOAD_ACC'
    MEM_STORE_ACC = 'MEM_STORE_ACC'
    MEM_WRITE_CFG = 'MEM_WRITE_CFG'


ELEMENTWISE_KINDS = (
    CommandKind.STREAM_SUM, CommandKind.STREAM_MAX, CommandKind.STREAM_MIN,
    CommandKind.STREAM_SCALE, CommandKind.STREAM_SHIFT,
)


@dataclass(frozen=True)
class NstConfig:
    """
    Loop and AGU programming of one NST.

    Bases are SPM byte offsets; steps are in elements. Loop i0 runs
    innermost; the element visited at (i0, i1, i2) lies at
    base + 4 * (i0*S0 + i1*S1 + i2*S2).
    """
    agu0_base: int = 0
    agu0_steps: Tuple[int, int, int] = (1, 0, 0)
    agu1_base: int = 0
    agu1_steps: Tuple[int, int, int] = (1, 0, 0)
    loops: Tuple[int, int, int] = (1, 1, 1)
    acc_init: float = 0.0

    def __post_init__(self):
        if any(int(l) < 1 for l in self.loops):
            raise NstFault(f"Loop bounds must be >= 1, got {self.loops}")

    @property
    def length(self) -> int:
        l0, l1, l2 = self.loops
        return l0 * l1 * l2


@dataclass(frozen=True)
class NstCommand:
    """A queued command; config, address and operand are used by the kinds that need them."""
    kind: CommandKind
    config: Optional[NstConfig] = None
    address: Optional[int] = None
    operand: float = 0.0


def agu_addresses(base: int, steps: Tuple[int, int, int], loops: Tuple[int, int, int]) -> np.ndarray:
    """Byte addresses of an AGU stream in issue order (i0 fastest)."""
    l0, l1, l2 = loops
    s0, s1, s2 = steps
    i2, i1, i0 = np.meshgrid(np.arange(l2), np.arange(l1), np.arange(l0), indexing='ij')
    return (base + WORD_BYTES * (i0 * s0 + i1 * s1 + i2 * s2)).ravel().astype(np.int64)


def agu_addresses_loop(base: int, steps: Tuple[int, int, int], loops: Tuple[int, int, int]) -> List[int]:
    """Incremental AGU: bump by S0 each cycle, rewind and bump by S1/S2 on loop wrap."""
    l0, l1, l2 = loops
    s0, s1, s2 = steps
    addresses = []
    address = base
    i0 = i1 = 0
    for _ in range(l0 * l1 * l2):
        addresses.append(address)
        address += WORD_BYTES * s0
        i0 += 1
        if i0 == l0:
            i0 = 0
            address += WORD_BYTES * (s1 - l0 * s0)
            i1 += 1
            if i1 == l1:
                i1 = 0
                address += WORD_BYTES * (s2 - l1 * s1)
    return addresses


class SpmImage:
    """
    Cluster scratchpad as an array of FP32 words.

    Bank of a byte address is (address / 4) mod n_banks.
    """

    def __init__(self, size_bytes: int, n_banks: int):
        if size_bytes % (WORD_BYTES * n_banks):
            raise NstFault(f"SPM size {size_bytes} is not a multiple of {n_banks} banks of words")
        self.size_bytes = size_bytes
        self.n_banks = n_banks
        self.words = np.zeros(size_bytes // WORD_BYTES, dtype=np.float32)

    def bank(self, address):
        return (np.asarray(address) // WORD_BYTES) % self.n_banks

    def check(self, addresses: np.ndarray, what: str = 'access'):
        addresses = np.asarray(addresses)
        if addresses.size == 0:
            return
        if np.any(addresses % WORD_BYTES):
            bad = int(addresses[addresses % WORD_BYTES != 0][0])
            raise NstFault(f"Unaligned {what} at byte {bad}")
        low, high = int(addresses.min()), int(addresses.max())
        if low < 0 or high + WORD_BYTES > self.size_bytes:
            raise NstFault(f"{what} range [{low}, {high}] outside SPM of {self.size_bytes} B")

    def read(self, addresses) -> np.ndarray:
        addresses = np.asarray(addresses)
        self.check(addresses, 'read')
        return self.words[addresses // WORD_BYTES]

    def write(self, addresses, values):
        addresses = np.asarray(addresses)
        self.check(addresses, 'write')
        self.words[addresses // WORD_BYTES] = np.asarray(values, dtype=np.float32)

    def load(self, address: int, values: np.ndarray):
        """DMA-copy a contiguous array into the SPM."""
        flat = np.asarray(values, dtype=np.float32).ravel()
        self.check(np.array([address, address + (flat.size - 1) * WORD_BYTES]), 'DMA write')
        start = address // WORD_BYTES
        self.words[start:start + flat.size] = flat

    def dump(self, address: int, count: int) -> np.ndarray:
        """DMA-copy `count` contiguous words out of the SPM."""
        self.check(np.array([address, address + (count - 1) * WORD_BYTES]), 'DMA read')
        start = address // WORD_BYTES
        return self.words[start:start + count].copy()

    def bank_histogram(self, addresses) -> np.ndarray:
        return np.bincount(self.bank(addresses), minlength=self.n_banks)


# ---------------------------------------------------------------------------
# SPM layout
# ---------------------------------------------------------------------------

def _align_to_residue(value: int, residue: int, n_banks: int) -> int:
    """Smallest p >= value with p mod n_banks == residue mod n_banks."""
    target = residue % n_banks
    return value + (target - value) % n_banks


@dataclass(frozen=True)
class SpmLayout:
    """
    Element offsets of one tile's data, coefficients and outputs in SPM.

    Row and plane pitches are padded so that the rows an NST walks through
    start on a bank that differs from their neighbours; the coefficient
    region is skewed away from the data region by `skew` banks.
    """
    aug_x: int
    aug_y: int
    t_ci: int
    t_co: int
    t_xo: int
    t_yo: int
    kernel: Tuple[int, int]
    stride: Tuple[int, int]
    n_banks: int
    row_pitch: int
    plane_pitch: int
    coef_base: int
    out_base: int
    skew: int

    @property
    def end(self) -> int:
        return self.out_base + self.t_co * self.t_xo * self.t_yo

    @property
    def end_bytes(self) -> int:
        return self.end * WORD_BYTES

    def data_offset(self, c: int, y: int, x: int) -> int:
        return c * self.plane_pitch + y * self.row_pitch + x

    def coef_offset(self, co: int, ci: int, ky: int, kx: int) -> int:
        return self.coef_base + ((co * self.t_ci + ci) * self.kernel[1] + ky) * self.kernel[0] + kx

    def out_offset(self, co: int, yo: int, xo: int) -> int:
        return self.out_base + (co * self.t_yo + yo) * self.t_xo + xo


def plan_spm_layout(aug_x: int, aug_y: int, t_ci: int, t_co: int, t_xo: int, t_yo: int,
                    kernel: Tuple[int, int], stride: Tuple[int, int], n_banks: int,
                    n_nst: int, skew: Optional[int] = None) -> SpmLayout:
    """
    Place a tile in SPM with bank-aware pitches.

    The row pitch is the smallest value >= aug_x congruent to Kx modulo the
    bank count, the plane pitch the smallest >= row_pitch*aug_y congruent to
    Ky*row_pitch. Coefficients start at a bank offset of -skew relative to
    the data; the default skew separates the banks touched by the data
    streams of all NSTs.
    """
    kx, ky = kernel
    sx = stride[0]
    row_pitch = _align_to_residue(aug_x, kx, n_banks)
    plane_pitch = _align_to_residue(row_pitch * aug_y, ky * row_pitch, n_banks)
    if skew is None:
        skew = (n_banks - n_nst * sx) // 2 + 1 if n_banks > n_nst * sx else 1
    coef_base = _align_to_residue(plane_pitch * t_ci, -skew, n_banks)
    out_base = coef_base + kx * ky * t_ci * t_co
    return SpmLayout(aug_x, aug_y, t_ci, t_co, t_xo, t_yo, (kx, ky), tuple(stride), n_banks,
                     row_pitch, plane_pitch, coef_base, out_base, skew)


# ---------------------------------------------------------------------------
# Command execution
# ---------------------------------------------------------------------------

class NeuroStream:
    """
    One NST: a bounded FIFO of commands executed in issue order.

    A full queue rejects the command and counts a stall; the issuing PE
    retries later, so nothing is dropped.
    """

    def __init__(self, spm: SpmImage, nst_id: int = 0, queue_depth: int = 4):
        self.spm = spm
        self.nst_id = nst_id
        self.queue_depth = queue_depth
        self.queue: Deque[NstCommand] = deque()
        self.config = NstConfig()
        self.acc = np.float32(0.0)
        self.stalls = 0
        self.executed = 0
        self.faults: List[str] = []

    @property
    def depth(self) -> int:
        return len(self.queue)

    def issue(self, command: NstCommand) -> bool:
        if len(self.queue) >= self.queue_depth:
            self.stalls += 1
            return False
        self.queue.append(command)
        return True

    def step(self):
        """Execute the oldest queued command, if any."""
        if not self.queue:
            return None
        command = self.queue.popleft()
        try:
            result = _execute(self, command)
        except NstFault as e:
            self.faults.append(f"NST {self.nst_id} {command.kind.value}: {e}")
            logger.error(self.faults[-1])
            raise
        self.executed += 1
        return result

    def run(self):
        while self.queue:
            self.step()

    def submit(self, *commands: NstCommand):
        """Issue and drain commands one at a time (a PE that waits on each stall)."""
        for command in commands:
            while not self.issue(command):
                self.step()
        self.run()


def _streams(nst: NeuroStream):
    cfg = nst.config
    a0 = agu_addresses(cfg.agu0_base, cfg.agu0_steps, cfg.loops)
    a1 = agu_addresses(cfg.agu1_base, cfg.agu1_steps, cfg.loops)
    return a0, a1


def stream_mac(nst: NeuroStream, spm: SpmImage) -> np.float32:
    """acc += a*b over the configured loops, accumulated sequentially in FP32."""
    a0, a1 = _streams(nst)
    products = spm.read(a0) * spm.read(a1)
    running = np.cumsum(np.concatenate(([nst.acc], products)).astype(np.float32), dtype=np.float32)
    nst.acc = np.float32(running[-1])
    return nst.acc


def stream_maxpl(nst: NeuroStream, spm: SpmImage) -> np.ndarray:
    """
    Max pooling: for each i2, the max over its (L0, L1) window read by AGU0
    is written to agu1_base + 4*i2*S2 of AGU1.
    """
    cfg = nst.config
    l0, l1, l2 = cfg.loops
    values = spm.read(agu_addresses(cfg.agu0_base, cfg.agu0_steps, cfg.loops)).reshape(l2, l1 * l0)
    pooled = values.max(axis=1)
    targets = cfg.agu1_base + WORD_BYTES * cfg.agu1_steps[2] * np.arange(l2)
    spm.write(targets, pooled)
    return pooled


def stream_elementwise(nst: NeuroStream, spm: SpmImage, kind: CommandKind, operand: float = 0.0) -> np.ndarray:
    """
    In-place element-wise op on the AGU0 stream.

    SUM adds the AGU1 stream; MAX/MIN compare against the scalar operand
    (MAX against 0 is ReLU); SCALE multiplies by it; SHIFT scales by 2**operand.
    """
    a0, a1 = _streams(nst)
    values = spm.read(a0)
    scalar = np.float32(operand)
    if kind == CommandKind.STREAM_SUM:
        result = values + spm.read(a1)
    elif kind == CommandKind.STREAM_MAX:
        result = np.maximum(values, scalar)
    elif kind == CommandKind.STREAM_MIN:
        result = np.minimum(values, scalar)
    elif kind == CommandKind.STREAM_SCALE:
        result = values * scalar
    elif kind == CommandKind.STREAM_SHIFT:
        result = np.ldexp(values, int(operand)).astype(np.float32)
    else:
        raise NstFault(f"{kind.value} is not an element-wise stream")
    spm.write(a0, result)
    return result


def _execute(nst: NeuroStream, command: NstCommand):
    spm = nst.spm
    kind = command.kind
    if kind == CommandKind.MEM_WRITE_CFG:
        if command.config is None:
            raise NstFault("MEM_WRITE_CFG without a config")
        nst.config = command.config
        nst.acc = np.float32(command.config.acc_init)
        return None
    if kind == CommandKind.STREAM_MAC:
        return stream_mac(nst, spm)
    if kind == CommandKind.STREAM_MAXPL:
        return stream_maxpl(nst, spm)
    if kind in ELEMENTWISE_KINDS:
        return stream_elementwise(nst, spm, kind, command.operand)

    address = command.address if command.address is not None else nst.config.agu0_base
    if kind == CommandKind.SINGLE_ADD:
        nst.acc = np.float32(nst.acc + spm.read([address])[0])
        return nst.acc
    if kind == CommandKind.SINGLE_MUL:
        nst.acc = np.float32(nst.acc * spm.read([address])[0])
        return nst.acc
    if kind == CommandKind.MEM_LOAD_ACC:
        nst.acc = np.float32(spm.read([address])[0])
        return nst.acc
    if kind == CommandKind.MEM_STORE_ACC:
        spm.write([address], [nst.acc])
        return nst.acc
    raise NstFault(f"Unknown command {kind}")


def issue(nst: NeuroStream, command: NstCommand) -> bool:
    """Queue a command; False means the queue was full and the caller must stall."""
    return nst.issue(command)

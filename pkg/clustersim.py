"""
Cycle-level simulation of one NeuroCluster executing one tile.

Each cycle the PEs issue NST jobs through bounded command queues, every
active NST requests one datum and one coefficient word from the SPM (plus
an output store at the end of a job), and every bank grants one request.
Losing requests retry next cycle. The measured performance efficiency
(PEF) of representative tiles is tabulated per efficiency bucket and
consumed by the epoch simulator.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from error_handling import UserInputError, log_info
from hardware import ClusterConfig, HardwareProfile
from model import layer_macs
from models import NetworkDescriptor
from nst import plan_spm_layout
from tiling import AxisTile, NstJob, Schedule, Tile4D, TilingInfeasibleError, partition_tile, representative_tile

logger = logging.getLogger(__name__)

POLICIES = ('round_robin', 'fixed_priority')


class CalibrationError(UserInputError):
    """Raised when a bucket has no representative tile or a table lacks a bucket."""
    pass


# ---------------------------------------------------------------------------
# Arbitration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Request:
    """One SPM word request; requester = 2*nst + port, kind 'd'/'c' reads or 'w' write."""
    requester: int
    kind: str
    address: int
    owner: object = field(default=None, compare=False)


@dataclass
class Arbitration:
    granted: List[Request]
    stalled: List[Request]
    per_bank: Dict[int, int]


def arbitrate(requests: Sequence[Request], n_banks: int, policy: str = 'round_robin',
              pointers: Optional[List[int]] = None, n_requesters: Optional[int] = None,
              combine: bool = True) -> Arbitration:
    """
    Grant at most one access per bank for one cycle.

    Round robin picks the requester closest after the bank's pointer and
    moves the pointer past it; fixed priority always picks the lowest
    requester id. With combining, reads of the word the winner reads are
    served by the same access.

    Args:
        requests: Requests of this cycle; addresses are in words
        n_banks: Number of SPM banks (bank = address mod n_banks)
        policy: 'round_robin' or 'fixed_priority'
        pointers: Per-bank round-robin pointers, updated in place
        n_requesters: Size of the requester ring
        combine: Whether identical-address reads share one grant

    Returns:
        Arbitration: granted and stalled requests plus per-bank request counts
    """
    if policy not in POLICIES:
        raise UserInputError(f"Unknown arbitration policy '{policy}'")
    if pointers is None:
        pointers = [0] * n_banks
    ring = n_requesters or (max((r.requester for r in requests), default=0) + 1)

    by_bank: Dict[int, List[Request]] = {}
    for request in requests:
        by_bank.setdefault(request.address % n_banks, []).append(request)

    granted, stalled = [], []
    for bank, queue in by_bank.items():
        if policy == 'round_robin':
            pointer = pointers[bank]
            winner = min(queue, key=lambda r: (r.requester - pointer) % ring)
            pointers[bank] = (winner.requester + 1) % ring
        else:
            winner = min(queue, key=lambda r: r.requester)
        granted.append(winner)
        for request in queue:
            if request is winner:
                continue
            if combine and winner.kind != 'w' and request.kind != 'w' and request.address == winner.address:
                granted.append(request)
            else:
                stalled.append(request)
    return Arbitration(granted, stalled, {b: len(q) for b, q in by_bank.items()})


# ---------------------------------------------------------------------------
# Tile simulation
# ---------------------------------------------------------------------------

@dataclass
class ConflictStats:
    """
    Cycle accounting of one tile.

    cycles == compute + conflict + pe_stall + dma_stall. compute is the
    ideal MACs / n_nst; pe_stall counts cycles NSTs waited for commands;
    conflict covers bank conflicts and pipeline bubbles.
    """
    cycles: int
    compute: int
    conflict: int
    pe_stall: int
    macs: int
    requests: float
    stalled: float
    n_nst: int
    finished: bool
    simulated_cycles: int
    dma_stall: int = 0
    bank_histogram: List[int] = field(default_factory=list)

    @property
    def pef(self) -> float:
        return self.macs / (self.cycles * self.n_nst) if self.cycles else 0.0

    @property
    def pe_share(self) -> float:
        """Fraction of the in-loop overhead caused by PE command issue."""
        overhead = self.cycles - self.compute
        return self.pe_stall / overhead if overhead > 0 else 0.0

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['pef'] = self.pef
        data['pe_share'] = self.pe_share
        return data


@dataclass
class _NstState:
    index: int
    jobs: List[NstJob]
    boot: int
    job: int = 0
    issued: int = 0
    data_requests: int = 0
    coef_requests: int = 0
    data_fifo: int = 0
    coef_fifo: int = 0
    macs: int = 0
    storing: bool = False
    done: bool = False


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def synthetic_tile(kernel: Tuple[int, int], t_ci: int, t_co: int, t_xo: int, t_yo: int,
                   stride: Tuple[int, int] = (1, 1), in_channels: Optional[int] = None) -> Tile4D:
    """A tile with the given output extent and no halo bookkeeping, for sweeps."""
    kx, ky = kernel
    sx, sy = stride
    aug_x = (t_xo - 1) * sx + kx
    aug_y = (t_yo - 1) * sy + ky
    return Tile4D(
        layer_id='synthetic', index=(0, 0, 0, 0),
        x=AxisTile(0, 0, aug_x, 0, t_xo, 0, 0, 0, 0),
        y=AxisTile(0, 0, aug_y, 0, t_yo, 0, 0, 0, 0),
        ci_lo=0, ci_hi=t_ci, co_lo=0, co_hi=t_co,
        kernel=(kx, ky), stride=(sx, sy),
        in_channels=in_channels or t_ci, out_channels=t_co,
    )


def simulate_tile(tile: Tile4D, cluster: ClusterConfig, jobs: Optional[List[NstJob]] = None,
                  window: int = 6000, commands: Optional[int] = None,
                  skew: Optional[int] = None) -> ConflictStats:
    """
    Simulate the NSTs of one cluster streaming a tile out of the SPM.

    Input rows are stored with bank-aware pitches (nst.plan_spm_layout)
    sized for the tile's receptive field. Each PE serves n_nst / n_pe NSTs
    round robin and spends `commands` x issue_cycles per job; an NST queue
    holds nst_queue_commands commands. Tiles longer than `window` cycles
    are extrapolated from the simulated prefix.

    Args:
        tile: Tile to run
        cluster: Cluster parameters (banks, NSTs, PE costs, arbitration)
        jobs: NST jobs; defaults to tiling.partition_tile
        window: Maximum simulated cycles
        commands: PE commands per job (3 when partial sums are reloaded, else 2)
        skew: Bank skew between data and coefficients

    Returns:
        ConflictStats: Cycle accounting and PEF

    Raises:
        TilingInfeasibleError: If the tile's ping-pong footprint exceeds the SPM
    """
    if tile.footprint_bytes > cluster.spm_bytes:
        raise TilingInfeasibleError({tile.layer_id: tile.footprint_bytes}, cluster.spm_bytes)
    kx, ky = tile.kernel
    sx, sy = tile.stride
    t_ci, t_co, t_xo, t_yo = tile.t_ci, tile.t_co, tile.t_xo, tile.t_yo
    n_nst, n_pe, n_banks = cluster.n_nst, cluster.n_pe, cluster.n_banks
    if commands is None:
        commands = 3 if tile.reloads_partials else 2
    if jobs is None:
        jobs = partition_tile(tile, n_nst)

    layout = plan_spm_layout((t_xo - 1) * sx + kx, (t_yo - 1) * sy + ky, t_ci, t_co, t_xo, t_yo,
                             (kx, ky), (sx, sy), n_banks, n_nst, skew)
    row_pitch, plane_pitch = layout.row_pitch, layout.plane_pitch
    coef_base, out_base = layout.coef_base, layout.out_base

    per_nst: List[List[NstJob]] = [[] for _ in range(n_nst)]
    for job in jobs:
        per_nst[job.nst].append(job)
    total_macs = sum(kx * ky * job.length for job in jobs)

    pe_job_cycles = commands * cluster.issue_cycles
    queue_jobs = max(1, cluster.nst_queue_commands // commands)
    per_pe = max(1, n_nst // n_pe)
    states = [_NstState(k, per_nst[k], cluster.nst_startup_cycles, done=not per_nst[k]) for k in range(n_nst)]
    pe_next = [0] * n_pe
    pe_rr = [0] * n_pe
    pointers = [0] * n_banks
    ring = n_nst * 2
    fifo = cluster.nst_fifo_depth
    startup = cluster.nst_startup_cycles
    histogram = np.zeros(n_banks, dtype=np.int64)

    cycle = macs = stalls = starved = requests = 0
    while cycle < window and not all(s.done for s in states):
        # PE command issue
        for p in range(n_pe):
            if cycle < pe_next[p]:
                continue
            for t in range(per_pe):
                k = p * per_pe + (pe_rr[p] + t) % per_pe
                s = states[k]
                if s.issued < len(s.jobs) and s.issued - s.job < queue_jobs:
                    s.issued += 1
                    pe_next[p] = cycle + pe_job_cycles
                    pe_rr[p] = (pe_rr[p] + t + 1) % per_pe
                    break

        # operand requests
        cycle_requests = []
        for s in states:
            if s.done:
                continue
            if s.job >= s.issued:
                starved += 1
                continue
            if s.boot > 0 and not s.storing:
                continue
            job = s.jobs[s.job]
            if s.storing:
                address = out_base + job.co * t_xo * t_yo + job.yo * t_xo + job.xo
                cycle_requests.append(Request(s.index * 2, 'w', address, s))
                continue
            length = kx * ky * job.length
            if s.data_requests < length and s.data_fifo < fifo:
                i = s.data_requests
                x, y, c = i % kx, (i // kx) % ky, job.ci_lo + i // (kx * ky)
                address = c * plane_pitch + (job.yo * sy + y) * row_pitch + job.xo * sx + x
                cycle_requests.append(Request(s.index * 2, 'd', address, s))
            if s.coef_requests < length and s.coef_fifo < fifo:
                address = coef_base + (job.co * t_ci + job.ci_lo) * kx * ky + s.coef_requests
                cycle_requests.append(Request(s.index * 2 + 1, 'c', address, s))
        requests += len(cycle_requests)

        result = arbitrate(cycle_requests, n_banks, cluster.arbitration, pointers, ring, cluster.read_combining)
        stalls += len(result.stalled)
        for bank, count in result.per_bank.items():
            histogram[bank] += count

        # one MAC per NST when both operands are buffered
        for s in states:
            if s.done or s.storing or s.job >= s.issued:
                continue
            if s.boot > 0:
                s.boot -= 1
                continue
            if s.data_fifo > 0 and s.coef_fifo > 0:
                s.data_fifo -= 1
                s.coef_fifo -= 1
                s.macs += 1
                macs += 1

        for request in result.granted:
            s = request.owner
            if request.kind == 'w':
                s.storing = False
                s.job += 1
                s.data_requests = s.coef_requests = s.macs = s.data_fifo = s.coef_fifo = 0
                s.boot = startup
                if s.job >= len(s.jobs):
                    s.done = True
            elif request.kind == 'd':
                s.data_requests += 1
                s.data_fifo += 1
            else:
                s.coef_requests += 1
                s.coef_fifo += 1

        for s in states:
            if not s.done and not s.storing and s.job < s.issued and s.macs == kx * ky * s.jobs[s.job].length:
                s.storing = True
        cycle += 1

    finished = all(s.done for s in states)
    loop, starve_total, stall_total, request_total = cycle, float(starved), float(stalls), float(requests)
    if not finished and macs > 0:
        factor = total_macs / macs
        loop = _round_half_up(cycle * factor)
        starve_total *= factor
        stall_total *= factor
        request_total *= factor

    compute = -(-total_macs // n_nst)
    loop = max(loop, compute)
    pe_stall = min(loop - compute, _round_half_up(starve_total / n_nst))
    return ConflictStats(
        cycles=loop, compute=compute, conflict=loop - compute - pe_stall, pe_stall=pe_stall,
        macs=total_macs, requests=request_total, stalled=stall_total, n_nst=n_nst,
        finished=finished, simulated_cycles=cycle, bank_histogram=histogram.tolist(),
    )


def dma_cycles(cluster: ClusterConfig, nbytes: float, bytes_per_cycle: float, transactions: int = 1) -> float:
    """
    Cycles to move `nbytes` in `transactions` DMA requests.

    At most dma_outstanding requests are in flight; each further group
    pays the setup latency again.
    """
    rounds = -(-max(1, transactions) // cluster.dma_outstanding)
    return rounds * cluster.dma_setup_cycles + nbytes / bytes_per_cycle


def tile_timeline(stats: ConflictStats, cluster: ClusterConfig, dma_bytes: float,
                  bytes_per_cycle: float, tiles: int = 1, transactions: int = 1) -> Dict[str, float]:
    """
    Ping-pong schedule of `tiles` identical tiles on one cluster.

    The DMA of tile n+1 overlaps compute of tile n, so only the first fill
    and any DMA time beyond a tile's compute are exposed.
    """
    transfer = dma_cycles(cluster, dma_bytes, bytes_per_cycle, transactions)
    compute = stats.cycles + cluster.loop_setup_cycles
    exposed = max(0.0, transfer - compute) * max(0, tiles - 1)
    total = transfer + tiles * compute + exposed
    return {'fill': transfer, 'compute': tiles * compute, 'dma_exposed': exposed, 'total': total}


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass
class BucketEfficiency:
    """Measured efficiency of one bucket's representative tile."""
    pef: float
    pe_share: float
    layer_id: str
    dims: Tuple[int, int, int, int]
    cycles: int
    macs: int
    finished: bool

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['dims'] = list(self.dims)
        return data


@dataclass
class EfficiencyTable:
    """Bucket key -> measured efficiency."""
    profile: str
    window: int
    entries: Dict[str, BucketEfficiency] = field(default_factory=dict)

    def lookup(self, key: str) -> BucketEfficiency:
        try:
            return self.entries[key]
        except KeyError:
            raise CalibrationError(f"Efficiency table has no bucket '{key}'")

    def missing(self, keys: Iterable[str]) -> List[str]:
        return sorted(set(keys) - set(self.entries))

    def to_dict(self) -> Dict:
        return {
            'profile': self.profile,
            'window': self.window,
            'entries': {k: v.to_dict() for k, v in sorted(self.entries.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'EfficiencyTable':
        try:
            table = cls(profile=data['profile'], window=data['window'])
            for key, entry in data['entries'].items():
                pef = float(entry['pef'])
                if not 0.0 < pef <= 1.0:
                    raise CalibrationError(f"Bucket '{key}' has PEF {pef} outside (0, 1]")
                table.entries[key] = BucketEfficiency(
                    pef=pef, pe_share=float(entry['pe_share']), layer_id=entry['layer_id'],
                    dims=tuple(entry['dims']), cycles=int(entry['cycles']), macs=int(entry['macs']),
                    finished=bool(entry['finished']),
                )
        except (KeyError, TypeError, ValueError) as e:
            raise CalibrationError(f"Malformed efficiency table: {e}")
        return table

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write('\n')

    @classmethod
    def load(cls, path: str) -> 'EfficiencyTable':
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                return cls.from_dict(json.load(handle))
        except FileNotFoundError:
            raise CalibrationError(f"Efficiency table not found: {path}")
        except json.JSONDecodeError as e:
            raise CalibrationError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")


def _bucket_representatives(net: NetworkDescriptor, schedule: Schedule) -> Dict[str, str]:
    """Bucket -> id of the scheduled layer with the most MACs in it (first on ties)."""
    best: Dict[str, Tuple[int, str]] = {}
    for layer in net.weighted_layers():
        entry = schedule.layers.get(layer.id)
        if entry is None:
            continue
        macs = layer_macs(layer)
        if entry.bucket not in best or macs > best[entry.bucket][0]:
            best[entry.bucket] = (macs, layer.id)
    return {bucket: layer_id for bucket, (_, layer_id) in best.items()}


def calibrate(profile: HardwareProfile, net: NetworkDescriptor, schedule: Schedule,
              window: int = 6000, buckets: Optional[Iterable[str]] = None) -> EfficiencyTable:
    """
    Measure PEF for every efficiency bucket of a schedule.

    The representative of a bucket is tile (0, 0, 0, 0) of the bucket's
    largest-MAC layer. Identical representative tiles are simulated once.

    Args:
        profile: Hardware profile (cluster parameters)
        net: Network the schedule was made for
        schedule: Tiling schedule
        window: Cycle window per tile simulation
        buckets: Buckets that must be covered; defaults to the schedule's

    Returns:
        EfficiencyTable: One entry per bucket

    Raises:
        CalibrationError: If a requested bucket has no representative in the schedule
    """
    representatives = _bucket_representatives(net, schedule)
    wanted = sorted(set(buckets)) if buckets is not None else sorted(representatives)
    missing = [b for b in wanted if b not in representatives]
    if missing:
        raise CalibrationError(f"No representative tile for bucket(s): {', '.join(missing)}")

    cluster = profile.cluster
    table = EfficiencyTable(profile=profile.name, window=window)
    layers = net.layer_map()
    cache: Dict[Tuple, ConflictStats] = {}
    for bucket in wanted:
        layer = layers[representatives[bucket]]
        dims = schedule.layers[layer.id].dims
        tile = representative_tile(layer, dims)
        key = (tile.kernel, tile.stride, tile.t_xo, tile.t_yo, tile.t_ci, tile.t_co, tile.reloads_partials)
        if key not in cache:
            cache[key] = simulate_tile(tile, cluster, window=window)
        stats = cache[key]
        table.entries[bucket] = BucketEfficiency(
            pef=stats.pef, pe_share=stats.pe_share, layer_id=layer.id, dims=tuple(dims),
            cycles=stats.cycles, macs=stats.macs, finished=stats.finished,
        )
        logger.debug(f"Bucket {bucket}: PEF {stats.pef:.4f} from {layer.id} {dims}")

    log_info(f"Calibrated {len(table.entries)} buckets for '{net.name}' "
             f"({len(cache)} distinct tiles)", 'calibrate')
    return table


# ---------------------------------------------------------------------------
# Banking-factor study
# ---------------------------------------------------------------------------

# fits the 128 kB SPM double-buffered for kernels up to 3x3
DEFAULT_SWEEP_TILES = (
    {'t_ci': 64, 't_co': 8, 't_xo': 8, 't_yo': 8},
    {'t_ci': 64, 't_co': 4, 't_xo': 12, 't_yo': 12},
    {'t_ci': 64, 't_co': 4, 't_xo': 10, 't_yo': 10},
    {'t_ci': 128, 't_co': 2, 't_xo': 6, 't_yo': 6},
)
DEFAULT_SWEEP_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)
DEFAULT_SWEEP_KERNELS = (1, 2, 3)


def bf_sweep(profile: HardwareProfile, kernels: Sequence[int] = DEFAULT_SWEEP_KERNELS,
             factors: Sequence[float] = DEFAULT_SWEEP_FACTORS,
             tiles: Sequence[Dict[str, int]] = DEFAULT_SWEEP_TILES,
             window: int = 6000) -> List[Dict]:
    """
    Mean PEF of a tile population for each (kernel, banking factor).

    The bank count for a factor is BF x n_nst x nst_ports.

    Returns:
        list: Rows {kernel, banking_factor, n_banks, mean_pef, min_pef, max_pef}
    """
    rows = []
    base = profile.cluster
    for kernel in kernels:
        for factor in factors:
            n_banks = int(round(factor * base.n_nst * base.nst_ports))
            if n_banks < 1:
                raise UserInputError(f"Banking factor {factor} leaves no banks")
            cluster = profile.with_overrides(cluster={'n_banks': n_banks}).cluster
            pefs = [simulate_tile(synthetic_tile((kernel, kernel), **t), cluster, window=window).pef for t in tiles]
            rows.append({
                'kernel': f"{kernel}x{kernel}",
                'banking_factor': factor,
                'n_banks': n_banks,
                'mean_pef': float(np.mean(pefs)),
                'min_pef': float(np.min(pefs)),
                'max_pef': float(np.max(pefs)),
            })
    log_info(f"Banking-factor sweep: {len(rows)} points", 'bf_sweep')
    return rows

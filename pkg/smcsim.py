"""
Epoch-based simulation of a ConvNet on one Smart Memory Cube.

Dispatch units (gx, gy, gco) of a layer are shared by the 16 clusters in
epochs; a unit's time comes from the calibrated PEF of its efficiency
bucket plus tile setup, and DRAM traffic beyond what an epoch can overlap
shows up as bandwidth stall. Clusters meet at a barrier after every layer.
The report splits total cycles into
T_U (useful compute), T_C (SPM conflicts), T_B (bandwidth limit),
T_L (loop/PE overhead) and T_S (synchronization).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from clustersim import EfficiencyTable, calibrate, dma_cycles
from error_handling import InvariantViolation, UserInputError, log_info, log_warning
from hardware import HardwareProfile, PhaseFactors
from model import layer_macs, resize_input
from models import LayerKind, NetworkDescriptor
from tiling import Schedule, check_schedule, layer_geometry, network_traffic, search_tiles

logger = logging.getLogger(__name__)

COMPONENTS = ('T_U', 'T_C', 'T_B', 'T_L', 'T_S')


class ScheduleMismatchError(UserInputError):
    """Raised when a schedule or efficiency table does not match the network."""
    pass


@dataclass
class LayerBreakdown:
    layer_id: str
    kind: str
    components: Dict[str, int]
    macs: int = 0
    read_bytes: int = 0
    write_bytes: int = 0
    fused_into: Optional[str] = None

    @property
    def cycles(self) -> int:
        return sum(self.components.values())

    def to_dict(self) -> Dict:
        row = {'layer': self.layer_id, 'kind': self.kind}
        row.update(self.components)
        row.update({
            'cycles': self.cycles,
            'macs': self.macs,
            'read_bytes': self.read_bytes,
            'write_bytes': self.write_bytes,
            'fused_into': self.fused_into or '',
        })
        return row


@dataclass
class SimReport:
    """Result of simulating one inference pass."""
    network: str
    profile: str
    clock_hz: float
    n_nst_total: int
    macs: int
    breakdown: Dict[str, int]
    layers: List[LayerBreakdown]
    read_bytes: int
    write_bytes: int
    input_shape: str = ''
    warnings: List[str] = field(default_factory=list)

    @property
    def cycles(self) -> int:
        return sum(self.breakdown.values())

    @property
    def time_s(self) -> float:
        return self.cycles / self.clock_hz

    @property
    def fps(self) -> float:
        return 1.0 / self.time_s if self.cycles else 0.0

    @property
    def gflops(self) -> float:
        return 2 * self.macs / self.time_s / 1e9 if self.cycles else 0.0

    @property
    def pef(self) -> float:
        return self.macs / (self.cycles * self.n_nst_total) if self.cycles else 0.0

    @property
    def oi(self) -> float:
        traffic = self.read_bytes + self.write_bytes
        return 2 * self.macs / traffic if traffic else math.inf

    @property
    def bandwidth_gbps(self) -> float:
        return (self.read_bytes + self.write_bytes) / self.time_s / 1e9 if self.cycles else 0.0

    @property
    def overhead_share(self) -> float:
        """Fraction of cycles that are not useful compute."""
        return 1.0 - self.breakdown['T_U'] / self.cycles if self.cycles else 0.0

    @property
    def pe_share(self) -> float:
        """T_L + T_S over total cycles (time spent on the PEs)."""
        return (self.breakdown['T_L'] + self.breakdown['T_S']) / self.cycles if self.cycles else 0.0

    def to_dict(self) -> Dict:
        return {
            'network': self.network,
            'profile': self.profile,
            'input_shape': self.input_shape,
            'macs': self.macs,
            'cycles': self.cycles,
            'time_s': self.time_s,
            'fps': self.fps,
            'gflops': self.gflops,
            'pef': self.pef,
            'oi_flop_per_byte': self.oi,
            'read_bytes': self.read_bytes,
            'write_bytes': self.write_bytes,
            'write_read_ratio': self.write_bytes / self.read_bytes if self.read_bytes else 0.0,
            'bandwidth_gbps': self.bandwidth_gbps,
            'breakdown': dict(self.breakdown),
            'pe_share': self.pe_share,
            'warnings': list(self.warnings),
        }


def _round(value: float) -> int:
    return int(math.floor(value + 0.5))


def _check_schedule(net: NetworkDescriptor, schedule: Schedule, profile: HardwareProfile,
                    table: EfficiencyTable):
    problems = check_schedule(net, schedule, profile.cluster.spm_bytes)
    if problems:
        raise ScheduleMismatchError(f"Schedule does not match '{net.name}': {'; '.join(problems)}")
    missing = table.missing(e.bucket for e in schedule.layers.values())
    if missing:
        raise ScheduleMismatchError(f"Efficiency table lacks bucket(s): {', '.join(missing)}")


def _fused_cycles(layer, n_lanes: int) -> float:
    ops = layer.out_shape.elements
    if layer.kind == LayerKind.POOL:
        ops *= layer.kernel[0] * layer.kernel[1]
    return ops / n_lanes


def simulate_network(net: NetworkDescriptor, schedule: Schedule, profile: HardwareProfile,
                     table: EfficiencyTable) -> SimReport:
    """
    Simulate one inference pass with the epoch model.

    Args:
        net: Network with inferred shapes
        schedule: Tiling of every CONV/FC layer
        profile: Hardware profile
        table: Efficiency table covering every bucket of the schedule

    Returns:
        SimReport: Time breakdown, traffic and throughput

    Raises:
        ScheduleMismatchError: If schedule, table and network disagree
    """
    _check_schedule(net, schedule, profile, table)
    smc = profile.smc
    cluster = smc.cluster
    nc, n_nst = smc.n_clusters, cluster.n_nst
    lanes = nc * n_nst
    bw = smc.dram_bytes_per_cycle
    layers = net.layer_map()
    fused = schedule.fused
    traffic = network_traffic(net, schedule)

    extra: Dict[str, float] = {}
    for fused_id, anchor in fused.items():
        extra[anchor] = extra.get(anchor, 0.0) + _fused_cycles(layers[fused_id], lanes)

    totals = {c: 0 for c in COMPONENTS}
    rows: List[LayerBreakdown] = []
    macs_total = 0
    warnings = []

    for layer in net.layers:
        parts = {c: 0.0 for c in COMPONENTS}
        row = LayerBreakdown(layer.id, layer.kind.value, {}, fused_into=fused.get(layer.id))
        flow = traffic.get(layer.id)

        if layer.id in fused or layer.kind == LayerKind.CONCAT:
            pass
        elif layer.id in schedule.layers:
            entry = schedule.layers[layer.id]
            eff = table.lookup(entry.bucket)
            geo = layer_geometry(layer, entry.dims)
            units = geo.units
            epochs = -(-units // nc)
            macs = layer_macs(layer)
            macs_total += macs

            ideal = macs / units / n_nst
            loop = ideal / eff.pef
            overhead = loop - ideal
            setup = geo.nci * cluster.loop_setup_cycles
            unit_time = loop + setup
            share = units / nc

            dma_bytes = flow.read_bytes + flow.write_bytes / smc.dram.write_path_share
            active = min(units, nc)
            dma_epoch = active * (dma_bytes / units) / bw + active * smc.fragment_cycles(geo.nci)
            step_bytes = (geo.x.max_aug * geo.y.max_aug * geo.tci
                          + layer.kernel[0] * layer.kernel[1] * geo.tci * geo.tco) * layer.element_bytes
            # first step: one input block and one coefficient slice
            fill = dma_cycles(cluster, step_bytes, bw / nc, transactions=2)

            parts['T_U'] = share * ideal + extra.get(layer.id, 0.0)
            parts['T_C'] = share * overhead * (1 - eff.pe_share)
            parts['T_L'] = share * (overhead * eff.pe_share + setup)
            parts['T_S'] = cluster.barrier_cycles + (epochs - share) * unit_time + fill
            parts['T_B'] = epochs * max(0.0, dma_epoch - unit_time)
            row.macs = macs

            footprint = (layer.in_shape.elements + layer.out_shape.elements + layer.coefficient_count) \
                * layer.element_bytes
            if footprint > smc.dram.total_bytes:
                warnings.append(f"Layer '{layer.id}' needs {footprint} B of DRAM, cube has {smc.dram.total_bytes} B")
        elif layer.kind == LayerKind.CLASS:
            parts['T_L'] = layer.out_shape.elements * cluster.class_cycles_per_element
        else:
            inputs = len(layer.inputs)
            ops = layer.out_shape.elements
            ops *= layer.kernel[0] * layer.kernel[1] if layer.kind == LayerKind.POOL else (inputs - 1)
            compute = ops / lanes + extra.get(layer.id, 0.0)
            dma = (flow.read_bytes + flow.write_bytes) / bw
            parts['T_U'] = compute
            parts['T_B'] = max(0.0, dma - compute)
            parts['T_L'] = cluster.loop_setup_cycles
            parts['T_S'] = cluster.barrier_cycles

        row.components = {c: _round(parts[c]) for c in COMPONENTS}
        if flow is not None:
            row.read_bytes, row.write_bytes = flow.read_bytes, flow.write_bytes
        for c in COMPONENTS:
            totals[c] += row.components[c]
        rows.append(row)

    report = SimReport(
        network=net.name, profile=profile.name, clock_hz=cluster.clock_hz, n_nst_total=smc.n_nst_total,
        macs=macs_total, breakdown=totals, layers=rows,
        read_bytes=sum(t.read_bytes for t in traffic.values()),
        write_bytes=sum(t.write_bytes for t in traffic.values()),
        input_shape=str(net.input_shape), warnings=warnings,
    )
    if report.cycles != sum(r.cycles for r in rows):
        raise InvariantViolation("Breakdown components do not add up to the total")
    for warning in warnings:
        log_warning(warning, 'simulate_network')
    log_info(f"{net.name}: {report.fps:.2f} frames/s, {report.gflops:.1f} GFLOPS, PEF {report.pef:.3f}",
             'simulate_network')
    return report


def evaluate_network(net: NetworkDescriptor, profile: HardwareProfile, jobs: int = 1, window: int = 6000,
                     schedule: Optional[Schedule] = None, table: Optional[EfficiencyTable] = None):
    """
    Search, calibrate and simulate in one go.

    Returns:
        tuple: (Schedule, EfficiencyTable, SimReport)
    """
    if schedule is None:
        schedule = search_tiles(net, profile, jobs=jobs)
    if table is None:
        table = calibrate(profile, net, schedule, window=window)
    return schedule, table, simulate_network(net, schedule, profile, table)


# ---------------------------------------------------------------------------
# Roofline
# ---------------------------------------------------------------------------

def roofline(profile: HardwareProfile, oi: float) -> float:
    """Attainable GFLOPS at operational intensity `oi` (FLOP/byte)."""
    if not oi > 0:
        raise UserInputError(f"Operational intensity must be positive, got {oi}")
    smc = profile.smc
    return min(smc.peak_gflops, oi * smc.dram.internal_bandwidth_gbps)


def ridge_point(profile: HardwareProfile) -> float:
    """OI where the bandwidth roof meets the compute roof."""
    return profile.smc.peak_gflops / profile.smc.dram.internal_bandwidth_gbps


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------

PLACEMENTS = ('in-cube', 'host-side')


@dataclass
class EnergyReport:
    network: str
    placement: str
    activity: float
    time_s: float
    cube_power_w: float
    neurocluster_power_w: float
    host_power_w: float
    gflops: float
    components_w: Dict[str, float]

    @property
    def power_w(self) -> float:
        return self.cube_power_w + self.host_power_w

    @property
    def energy_j(self) -> float:
        return self.power_w * self.time_s

    @property
    def gflops_per_w(self) -> float:
        return self.gflops / self.power_w if self.power_w else 0.0

    @property
    def neurocluster_gflops_per_w(self) -> float:
        return self.gflops / self.neurocluster_power_w if self.neurocluster_power_w else 0.0

    def to_dict(self) -> Dict:
        return {
            'network': self.network,
            'placement': self.placement,
            'activity': self.activity,
            'time_s': self.time_s,
            'power_w': self.power_w,
            'cube_power_w': self.cube_power_w,
            'neurocluster_power_w': self.neurocluster_power_w,
            'host_power_w': self.host_power_w,
            'energy_j': self.energy_j,
            'gflops': self.gflops,
            'gflops_per_w': self.gflops_per_w,
            'neurocluster_gflops_per_w': self.neurocluster_gflops_per_w,
            'components_w': dict(self.components_w),
        }


def energy_report(report: SimReport, profile: HardwareProfile, placement: str = 'in-cube') -> EnergyReport:
    """
    Power and energy of a simulated pass.

    Cube power is the DRAM/base constant plus NeuroCluster power scaled by
    activity (the pass's PEF) and by clock. Host-side placement adds the
    SMC-controller and link power of moving data to the host.
    """
    if placement not in PLACEMENTS:
        raise UserInputError(f"Unknown placement '{placement}' (use {' or '.join(PLACEMENTS)})")
    energy = profile.energy
    smc = profile.smc
    activity = report.pef
    clock_scale = report.clock_hz / 1e9
    nc_power = energy.neurocluster_w * activity * clock_scale

    nst = smc.n_nst_total * energy.nst_mw * 1e-3 * activity * clock_scale
    pe = smc.n_clusters * smc.cluster.n_pe * energy.pe_mw * 1e-3 * activity * clock_scale
    spm = energy.spm_share * nc_power
    components = {'spm': spm, 'nst': nst, 'pe': pe, 'other': max(0.0, nc_power - spm - nst - pe)}

    return EnergyReport(
        network=report.network, placement=placement, activity=activity, time_s=report.time_s,
        cube_power_w=energy.cube_base_w + nc_power, neurocluster_power_w=nc_power,
        host_power_w=energy.host_side_adder_w if placement == 'host-side' else 0.0,
        gflops=report.gflops, components_w=components,
    )


def placement_comparison(report: SimReport, profile: HardwareProfile) -> Dict[str, float]:
    """In-cube versus host-side efficiency and the energy saved in-cube."""
    inside = energy_report(report, profile, 'in-cube')
    host = energy_report(report, profile, 'host-side')
    return {
        'in_cube_gflops_per_w': inside.gflops_per_w,
        'host_side_gflops_per_w': host.gflops_per_w,
        'efficiency_ratio': inside.gflops_per_w / host.gflops_per_w,
        'energy_reduction': 1.0 - inside.energy_j / host.energy_j,
    }


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingEstimate:
    network: str
    preset: str
    inference_s: float
    training_s: float
    weight_update_s: float
    training_flops: float

    @property
    def ratio(self) -> float:
        return self.training_s / self.inference_s if self.inference_s else 0.0

    @property
    def gflops(self) -> float:
        return self.training_flops / self.training_s / 1e9 if self.training_s else 0.0

    @property
    def weight_update_share(self) -> float:
        return self.weight_update_s / self.training_s if self.training_s else 0.0

    def to_dict(self) -> Dict:
        return {
            'network': self.network,
            'preset': self.preset,
            'inference_s': self.inference_s,
            'training_s': self.training_s,
            'ratio': self.ratio,
            'gflops': self.gflops,
            'weight_update_s': self.weight_update_s,
            'weight_update_share': self.weight_update_share,
        }


def training_estimate(report: SimReport, factors: PhaseFactors, preset: str = 'custom') -> TrainingEstimate:
    """
    Scale per-layer inference time into a training pass.

    Every layer pays forward_extra x gradient; CONV/FC layers also pay the
    weight update. Training work is three times the inference FLOPs.
    """
    clock = report.clock_hz
    total = 0.0
    update = 0.0
    for row in report.layers:
        base = row.cycles / clock * factors.forward_extra * factors.gradient
        if row.kind in (LayerKind.CONV.value, LayerKind.FC.value):
            update += base * (factors.weight_update - 1.0)
            base *= factors.weight_update
        total += base
    return TrainingEstimate(
        network=report.network, preset=preset, inference_s=report.time_s, training_s=total,
        weight_update_s=update, training_flops=3 * 2 * report.macs,
    )


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def frequency_sweep(net: NetworkDescriptor, profile: HardwareProfile, clocks_hz: Sequence[float],
                    schedule: Optional[Schedule] = None, table: Optional[EfficiencyTable] = None,
                    window: int = 6000) -> List[Dict]:
    """
    Re-run the epoch model at other cluster clocks.

    DRAM bandwidth and fragment latency stay fixed in wall-clock terms;
    NeuroCluster power scales with the clock.
    """
    rows = []
    for clock in clocks_hz:
        scaled = profile.with_overrides(cluster={'clock_hz': float(clock)})
        _, _, report = evaluate_network(net, scaled, window=window, schedule=schedule, table=table)
        power = energy_report(report, scaled)
        rows.append({
            'clock_ghz': clock / 1e9,
            'fps': report.fps,
            'gflops': report.gflops,
            'pef': report.pef,
            'power_w': power.power_w,
            'gflops_per_w': power.gflops_per_w,
        })
    return rows


def scaling_sweep(net: NetworkDescriptor, profile: HardwareProfile, sides: Sequence[int],
                  jobs: int = 1, window: int = 6000) -> List[Dict]:
    """Time, overhead share and time per pixel of a network over square input sizes."""
    rows = []
    for side in sides:
        resized = resize_input(net, side)
        _, _, report = evaluate_network(resized, profile, jobs=jobs, window=window)
        pixels = side * side
        rows.append({
            'side': side,
            'pixels': pixels,
            'time_s': report.time_s,
            'time_per_pixel_ns': report.time_s / pixels * 1e9,
            'overhead_share': report.overhead_share,
            'gflops': report.gflops,
        })
    return rows

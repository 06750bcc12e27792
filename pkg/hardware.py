"""
Hardware profiles for the SMC simulator.

Architectural, DRAM, energy, serial-link, search and training constants are
grouped into dataclasses and bundled in a HardwareProfile. Profiles are
stored as JSON under the config directory; values in a file overlay the
dataclass defaults, which reproduce the baseline system (16 clusters of
4 PEs and 8 NSTs, 128 kB SPM, 320 GB/s internal DRAM bandwidth).
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, Optional

from config import get_config
from error_handling import UserInputError

logger = logging.getLogger(__name__)


class HardwareConfigError(UserInputError):
    """Raised for unknown keys or out-of-range values in a hardware profile."""
    pass


@dataclass(frozen=True)
class ClusterConfig:
    """One NeuroCluster: PEs, NSTs, scratchpad and the PE-side cycle costs."""

    n_pe: int = 4
    n_nst: int = 8
    spm_bytes: int = 131072
    n_banks: int = 32
    nst_ports: int = 2
    dma_outstanding: int = 32
    axi_ports: int = 3
    axi_gbps: float = 32.0
    clock_hz: float = 1e9

    # NST micro-architecture
    nst_fifo_depth: int = 8
    nst_startup_cycles: int = 4
    nst_queue_commands: int = 4

    # Calibrated PE overhead constants (cycles)
    issue_cycles: int = 10
    loop_setup_cycles: int = 200
    dma_setup_cycles: int = 100
    barrier_cycles: int = 500
    class_cycles_per_element: int = 20

    arbitration: str = 'round_robin'
    read_combining: bool = True

    @property
    def banking_factor(self) -> float:
        return self.n_banks / (self.n_nst * self.nst_ports)


@dataclass(frozen=True)
class DramConfig:
    """Cube DRAM: capacity, organisation and the aggregate bandwidth pool."""

    total_bytes: int = 1 << 30
    n_dies: int = 4
    bank_bytes: int = 32 << 20
    page_policy: str = 'closed'
    address_interleaving: str = 'low'
    internal_bandwidth_gbps: float = 320.0
    fragment_penalty_ns: float = 50.0
    fragment_parallelism: int = 32
    write_path_share: float = 1.0

    @property
    def n_banks(self) -> int:
        return self.total_bytes // self.bank_bytes

    @property
    def banks_per_die(self) -> int:
        return self.n_banks // self.n_dies

    @property
    def parallel_fragments(self) -> int:
        """Fragment accesses that overlap: low interleaving spreads a buffer over every bank, high keeps it in one die."""
        banks = self.n_banks if self.address_interleaving == 'low' else self.banks_per_die
        return max(1, min(self.fragment_parallelism, banks))

    def penalised_transfers(self, n_ci):
        """
        Row activations per dispatch unit with n_ci input-channel slices.

        Closed page reopens a row for every block, coefficient slice and the
        output write. Open page streams a unit's back-to-back input blocks
        through one open row. Works elementwise on arrays.
        """
        if self.page_policy == 'closed':
            return 2 * n_ci + 1
        return n_ci + 2


@dataclass(frozen=True)
class SmcConfig:
    """A Smart Memory Cube: clusters, DRAM and serial links."""

    n_clusters: int = 16
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    dram: DramConfig = field(default_factory=DramConfig)
    n_links: int = 4

    @property
    def n_nst_total(self) -> int:
        return self.n_clusters * self.cluster.n_nst

    @property
    def peak_gflops(self) -> float:
        return self.n_nst_total * 2 * self.cluster.clock_hz / 1e9

    @property
    def dram_bytes_per_cycle(self) -> float:
        return self.dram.internal_bandwidth_gbps * 1e9 / self.cluster.clock_hz

    @property
    def fragment_penalty_cycles(self) -> float:
        return self.dram.fragment_penalty_ns * 1e-9 * self.cluster.clock_hz

    def fragment_cycles(self, n_ci):
        """Exposed fragment latency of one dispatch unit."""
        return self.dram.penalised_transfers(n_ci) * self.fragment_penalty_cycles / self.dram.parallel_fragments

    @property
    def interconnect_gbps(self) -> float:
        return self.n_clusters * self.cluster.axi_ports * self.cluster.axi_gbps


@dataclass(frozen=True)
class EnergyConfig:
    """Power figures in watts (per-core figures in milliwatts)."""

    cube_base_w: float = 8.8
    neurocluster_w: float = 2.2
    nst_mw: float = 2.7
    pe_mw: float = 2.2
    spm_share: float = 0.51
    link_budget_w: float = 10.0
    host_side_adder_w: float = 10.2


@dataclass(frozen=True)
class LinkConfig:
    """Serial-link power states and transition latencies."""

    active_w: float = 2.5
    sleep_fraction: float = 0.10
    powerdown_fraction: float = 0.01
    t_sme_s: float = 600e-9
    t_sd_s: float = 150e-6
    t_wake_s: float = 50e-6
    t_sleep_wake_s: float = 600e-9
    idle_timeout_s: float = 1e-3
    bandwidth_gbps: float = 16.0

    @property
    def sleep_w(self) -> float:
        return self.active_w * self.sleep_fraction

    @property
    def powerdown_w(self) -> float:
        return self.active_w * self.powerdown_fraction


@dataclass(frozen=True)
class SearchConfig:
    """Tile-search objective settings."""

    halo_traffic_weight: float = 1.0


@dataclass(frozen=True)
class PhaseFactors:
    """Per-layer time multipliers turning an inference pass into a training pass."""

    forward_extra: float = 1.0
    gradient: float = 1.0
    weight_update: float = 1.0


DEFAULT_TRAINING = {
    'current': PhaseFactors(forward_extra=1.15, gradient=3.0, weight_update=1.045),
    'best': PhaseFactors(forward_extra=1.0, gradient=2.9, weight_update=1.035),
}


@dataclass(frozen=True)
class HardwareProfile:
    """Everything the simulators need to know about the hardware."""

    name: str = 'paper-baseline'
    smc: SmcConfig = field(default_factory=SmcConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    link: LinkConfig = field(default_factory=LinkConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    training: Dict[str, PhaseFactors] = field(default_factory=lambda: dict(DEFAULT_TRAINING))

    @property
    def cluster(self) -> ClusterConfig:
        return self.smc.cluster

    def training_factors(self, preset: str = 'current') -> PhaseFactors:
        if preset not in self.training:
            raise HardwareConfigError(
                f"Unknown training preset '{preset}' (available: {', '.join(sorted(self.training))})"
            )
        return self.training[preset]

    def with_overrides(self, **sections: Dict[str, Any]) -> 'HardwareProfile':
        """
        Return a copy with some values replaced.

        Args:
            **sections: Section name ('cluster', 'dram', 'smc', 'energy',
                'link', 'search') mapped to a dict of field values

        Returns:
            HardwareProfile: Validated modified copy
        """
        profile = self
        for section, values in sections.items():
            if section == 'cluster':
                smc = replace(profile.smc, cluster=replace(profile.smc.cluster, **values))
                profile = replace(profile, smc=smc)
            elif section == 'dram':
                smc = replace(profile.smc, dram=replace(profile.smc.dram, **values))
                profile = replace(profile, smc=smc)
            elif section in ('smc', 'energy', 'link', 'search'):
                profile = replace(profile, **{section: replace(getattr(profile, section), **values)})
            elif section == 'name':
                profile = replace(profile, name=values)
            else:
                raise HardwareConfigError(f"Unknown profile section '{section}'")
        validate_profile(profile)
        return profile

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['training'] = {name: asdict(factors) for name, factors in self.training.items()}
        return data


def _overlay(cls, values: Dict[str, Any], path: str):
    """Build a dataclass instance from defaults overlaid with values."""
    if not isinstance(values, dict):
        raise HardwareConfigError(f"'{path}' must be an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise HardwareConfigError(f"Unknown key '{path}.{key}'")
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _overlay(type(default), value, f"{path}.{key}")
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise HardwareConfigError(f"'{path}.{key}' must be true or false")
            kwargs[key] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise HardwareConfigError(f"'{path}.{key}' must be a number, got {value!r}")
            kwargs[key] = float(value)
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise HardwareConfigError(f"'{path}.{key}' must be an integer, got {value!r}")
            kwargs[key] = value
        else:
            kwargs[key] = value
    return cls(**kwargs)


def validate_profile(profile: HardwareProfile) -> HardwareProfile:
    """
    Check the invariants a profile must satisfy.

    Raises:
        HardwareConfigError: On the first violated invariant
    """
    cluster = profile.smc.cluster
    dram = profile.smc.dram

    if cluster.banking_factor <= 0:
        raise HardwareConfigError("Banking factor must be positive")
    if cluster.spm_bytes % (cluster.n_banks * 4) != 0:
        raise HardwareConfigError(
            f"SPM size {cluster.spm_bytes} is not divisible by n_banks*4 ({cluster.n_banks * 4})"
        )
    if cluster.n_pe < 1 or cluster.n_nst < 1 or cluster.n_nst % cluster.n_pe != 0:
        raise HardwareConfigError("n_nst must be a positive multiple of n_pe")
    if cluster.clock_hz <= 0 or profile.smc.n_clusters < 1:
        raise HardwareConfigError("Clock and cluster count must be positive")
    if cluster.dma_outstanding < 1:
        raise HardwareConfigError("dma_outstanding must be >= 1")
    if cluster.arbitration not in ('round_robin', 'fixed_priority'):
        raise HardwareConfigError(f"Unknown arbitration policy '{cluster.arbitration}'")
    if dram.internal_bandwidth_gbps <= 0 or dram.fragment_parallelism < 1:
        raise HardwareConfigError("DRAM bandwidth and fragment parallelism must be positive")
    if dram.bank_bytes < 1 or dram.total_bytes % dram.bank_bytes != 0:
        raise HardwareConfigError(f"DRAM size {dram.total_bytes} is not a multiple of bank_bytes {dram.bank_bytes}")
    if dram.n_dies < 1 or dram.n_banks % dram.n_dies != 0:
        raise HardwareConfigError(f"{dram.n_banks} DRAM banks cannot be split over {dram.n_dies} dies")
    if dram.page_policy not in ('closed', 'open'):
        raise HardwareConfigError(f"Unknown page policy '{dram.page_policy}'")
    if dram.address_interleaving not in ('low', 'high'):
        raise HardwareConfigError(f"Unknown address interleaving '{dram.address_interleaving}'")
    if not 0 < dram.write_path_share <= 1:
        raise HardwareConfigError("write_path_share must be in (0, 1]")
    if dram.internal_bandwidth_gbps > profile.smc.interconnect_gbps:
        raise HardwareConfigError(
            f"DRAM bandwidth {dram.internal_bandwidth_gbps} GB/s exceeds the cluster "
            f"interconnect capacity {profile.smc.interconnect_gbps} GB/s"
        )

    energy = profile.energy
    for name in ('cube_base_w', 'neurocluster_w', 'nst_mw', 'pe_mw', 'link_budget_w', 'host_side_adder_w'):
        if getattr(energy, name) < 0:
            raise HardwareConfigError(f"energy.{name} must be >= 0")
    nst_share = profile.smc.n_nst_total * energy.nst_mw * 1e-3 / energy.neurocluster_w if energy.neurocluster_w else 0.0
    pe_share = profile.smc.n_clusters * cluster.n_pe * energy.pe_mw * 1e-3 / energy.neurocluster_w if energy.neurocluster_w else 0.0
    if not 0 <= energy.spm_share <= 1 or energy.spm_share + nst_share + pe_share > 1 + 1e-9:
        raise HardwareConfigError("NeuroCluster component shares must sum to at most 1")

    link = profile.link
    if link.active_w < 0 or link.bandwidth_gbps <= 0:
        raise HardwareConfigError("Link power must be >= 0 and bandwidth positive")
    if profile.smc.n_links < 1:
        raise HardwareConfigError("A cube needs at least one serial link")
    if profile.smc.n_links * link.active_w > energy.link_budget_w + 1e-9:
        raise HardwareConfigError(
            f"{profile.smc.n_links} active links draw {profile.smc.n_links * link.active_w} W, "
            f"over the {energy.link_budget_w} W link budget"
        )
    for name in ('sleep_fraction', 'powerdown_fraction'):
        if not 0 <= getattr(link, name) <= 1:
            raise HardwareConfigError(f"link.{name} must be within [0, 1]")

    if profile.search.halo_traffic_weight < 0:
        raise HardwareConfigError("search.halo_traffic_weight must be >= 0")
    for preset, factors in profile.training.items():
        if min(factors.forward_extra, factors.gradient, factors.weight_update) <= 0:
            raise HardwareConfigError(f"Training factors of '{preset}' must be positive")
    return profile


def profile_from_dict(data: Dict[str, Any], default_name: str = 'custom') -> HardwareProfile:
    """Build and validate a profile from a parsed JSON document."""
    if not isinstance(data, dict):
        raise HardwareConfigError("A hardware profile must be a JSON object")
    allowed = {'name', 'description', 'smc', 'energy', 'link', 'search', 'training'}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise HardwareConfigError(f"Unknown profile keys: {', '.join(unknown)}")

    training = dict(DEFAULT_TRAINING)
    for preset, values in (data.get('training') or {}).items():
        training[preset] = _overlay(PhaseFactors, values, f"training.{preset}")

    profile = HardwareProfile(
        name=data.get('name', default_name),
        smc=_overlay(SmcConfig, data.get('smc', {}), 'smc'),
        energy=_overlay(EnergyConfig, data.get('energy', {}), 'energy'),
        link=_overlay(LinkConfig, data.get('link', {}), 'link'),
        search=_overlay(SearchConfig, data.get('search', {}), 'search'),
        training=training,
    )
    return validate_profile(profile)


def load_hardware_profile(name_or_path: Optional[str] = None, config_class=None) -> HardwareProfile:
    """
    Load a hardware profile by name or path.

    Args:
        name_or_path: Profile name under CONFIG_DIR or a JSON file path.
            Defaults to HARDWARE_PROFILE.
        config_class: Configuration class to use (defaults to current config)

    Returns:
        HardwareProfile: Validated profile

    Raises:
        HardwareConfigError: If the file is missing, malformed or invalid
    """
    config = config_class or get_config()
    path = config.profile_path(name_or_path)
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise HardwareConfigError(f"Hardware profile not found: {path}")
    except json.JSONDecodeError as e:
        raise HardwareConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")

    profile = profile_from_dict(data, default_name=name_or_path or config.HARDWARE_PROFILE)
    logger.debug(f"Loaded hardware profile '{profile.name}' from {path}")
    return profile

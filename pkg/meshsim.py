"""
Event-driven simulation of a mesh of Smart Memory Cubes fed by a camera.

Frames enter at the host link of one cube and travel store-and-forward
along shortest paths to the cube that will process them; every cube runs
whole frames independently, holding at most two frames (one computing, one
arriving). Serial links other than the host link are woken on demand,
put to sleep after an idle timeout and then powered down. Link energy is
integrated per power state.
"""

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import simpy

from error_handling import InvariantViolation, UserInputError, log_info, log_warning
from hardware import HardwareProfile, LinkConfig
from smcsim import SimReport

logger = logging.getLogger(__name__)


class MeshConfigError(UserInputError):
    """Raised for malformed or disconnected mesh scenarios."""
    pass


class LinkStateError(InvariantViolation):
    """Raised for a transition the link state machine does not allow."""
    pass


class LinkPowerState(str, Enum):
    ACTIVE = 'Active'
    SLEEP = 'Sleep'
    POWER_DOWN = 'PowerDown'


class LinkEvent(str, Enum):
    WAKE = 'WAKE'
    SLEEP = 'SLEEP'
    POWER_DOWN = 'POWER_DOWN'
    TRANSFER = 'TRANSFER'


@dataclass
class SerialLink:
    """One serial link with its power-state bookkeeping (times in seconds)."""
    link_id: str
    endpoints: Tuple[str, str]
    config: LinkConfig
    state: LinkPowerState = LinkPowerState.POWER_DOWN
    always_on: bool = False
    clock: float = 0.0
    dwell: Dict[LinkPowerState, float] = field(default_factory=lambda: {s: 0.0 for s in LinkPowerState})
    energy_j: float = 0.0
    bytes_moved: int = 0
    transfer_s: float = 0.0
    transitions: int = 0
    generation: int = 0
    timeline: List[Tuple[float, str, str]] = field(default_factory=list)

    def power(self, state: LinkPowerState) -> float:
        if state == LinkPowerState.ACTIVE:
            return self.config.active_w
        if state == LinkPowerState.SLEEP:
            return self.config.sleep_w
        return self.config.powerdown_w

    def charge(self, state: LinkPowerState, seconds: float):
        self.dwell[state] += seconds
        self.energy_j += seconds * self.power(state)

    def advance(self, now: float):
        """Charge the time since the last event to the current state."""
        if now > self.clock:
            self.charge(self.state, now - self.clock)
            self.clock = now

    @property
    def duty_cycle(self) -> float:
        total = sum(self.dwell.values())
        return self.dwell[LinkPowerState.ACTIVE] / total if total else 0.0

    def state_energy(self) -> float:
        return sum(self.dwell[s] * self.power(s) for s in LinkPowerState)


@dataclass(frozen=True)
class LinkStep:
    state: LinkPowerState
    elapsed_s: float
    energy_j: float


def step_link(link: SerialLink, event: LinkEvent, nbytes: int = 0) -> LinkStep:
    """
    Advance a link's state machine by one event.

    Transition time is charged at the power of the state being left;
    transfers run at Active power for nbytes / bandwidth.

    Raises:
        LinkStateError: For transitions the link does not allow
    """
    cfg = link.config
    state = link.state
    if event == LinkEvent.WAKE:
        if state == LinkPowerState.ACTIVE:
            return LinkStep(state, 0.0, 0.0)
        elapsed = cfg.t_sleep_wake_s if state == LinkPowerState.SLEEP else cfg.t_wake_s
        charged, target = state, LinkPowerState.ACTIVE
    elif event == LinkEvent.SLEEP:
        if link.always_on:
            raise LinkStateError(f"Link {link.link_id} is always on and cannot sleep")
        if state != LinkPowerState.ACTIVE:
            raise LinkStateError(f"Link {link.link_id}: SLEEP from {state.value}")
        elapsed, charged, target = cfg.t_sme_s, state, LinkPowerState.SLEEP
    elif event == LinkEvent.POWER_DOWN:
        if state != LinkPowerState.SLEEP:
            raise LinkStateError(f"Link {link.link_id}: POWER_DOWN from {state.value}")
        elapsed, charged, target = cfg.t_sd_s, state, LinkPowerState.POWER_DOWN
    elif event == LinkEvent.TRANSFER:
        if state != LinkPowerState.ACTIVE:
            raise LinkStateError(f"Link {link.link_id}: transfer while {state.value}")
        if nbytes < 0:
            raise LinkStateError(f"Link {link.link_id}: negative transfer size {nbytes}")
        elapsed = nbytes / (cfg.bandwidth_gbps * 1e9)
        charged, target = state, state
        link.bytes_moved += nbytes
        link.transfer_s += elapsed
    else:
        raise LinkStateError(f"Unknown link event {event}")

    energy = elapsed * link.power(charged)
    link.charge(charged, elapsed)
    link.clock += elapsed
    if target != state:
        link.state = target
        link.transitions += 1
        link.timeline.append((link.clock, link.link_id, target.value))
    return LinkStep(link.state, elapsed, energy)


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------

_SCENARIO_KEYS = {'name', 'description', 'network', 'n_cubes', 'edges', 'host_cube', 'frame',
                  'frame_rate', 'duration_s', 'hardware_profile'}


@dataclass(frozen=True)
class MeshConfig:
    """Topology, frame source and horizon of a mesh run."""
    name: str = 'mesh'
    network: str = 'resnet152'
    n_cubes: int = 4
    edges: Tuple[Tuple[int, int], ...] = ((0, 1), (0, 2), (1, 3), (2, 3))
    host_cube: int = 0
    frame_x: int = 2816
    frame_y: int = 2816
    frame_c: int = 3
    bytes_per_channel: int = 1
    frame_rate: Optional[float] = None
    duration_s: float = 300.0
    hardware_profile: str = 'paper-baseline'

    @property
    def frame_bytes(self) -> int:
        return self.frame_x * self.frame_y * self.frame_c * self.bytes_per_channel

    def neighbours(self) -> Dict[int, List[int]]:
        adjacency = {c: [] for c in range(self.n_cubes)}
        for a, b in self.edges:
            adjacency[a].append(b)
            adjacency[b].append(a)
        return {c: sorted(n) for c, n in adjacency.items()}

    def ports_used(self) -> Dict[int, int]:
        """Serial links attached to each cube; the host cube also holds Link0."""
        return {c: len(n) + (1 if c == self.host_cube else 0) for c, n in self.neighbours().items()}

    def route(self, target: int) -> List[Tuple[int, int]]:
        """Shortest hop list from the host cube to `target` (BFS, lowest ids first)."""
        parents = {self.host_cube: None}
        queue = deque([self.host_cube])
        adjacency = self.neighbours()
        while queue:
            cube = queue.popleft()
            for nxt in adjacency[cube]:
                if nxt not in parents:
                    parents[nxt] = cube
                    queue.append(nxt)
        if target not in parents:
            raise MeshConfigError(f"Cube {target} is not reachable from host cube {self.host_cube}")
        hops = []
        while parents[target] is not None:
            hops.append((parents[target], target))
            target = parents[target]
        return list(reversed(hops))


def validate_mesh(mesh: MeshConfig, n_links: Optional[int] = None) -> MeshConfig:
    """Check topology and frame settings; with `n_links`, also the links each cube can host."""
    if mesh.n_cubes < 1:
        raise MeshConfigError("A mesh needs at least one cube")
    if not 0 <= mesh.host_cube < mesh.n_cubes:
        raise MeshConfigError(f"Host cube {mesh.host_cube} outside 0..{mesh.n_cubes - 1}")
    seen = set()
    for a, b in mesh.edges:
        if not (0 <= a < mesh.n_cubes and 0 <= b < mesh.n_cubes) or a == b:
            raise MeshConfigError(f"Invalid mesh edge ({a}, {b})")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise MeshConfigError(f"Duplicate mesh edge {key}")
        seen.add(key)
    if mesh.frame_rate is not None and mesh.frame_rate <= 0:
        raise MeshConfigError("frame_rate must be positive or null (saturate)")
    if mesh.duration_s <= 0:
        raise MeshConfigError("duration_s must be positive")
    if min(mesh.frame_x, mesh.frame_y, mesh.frame_c, mesh.bytes_per_channel) < 1:
        raise MeshConfigError("Frame dimensions must be positive")
    for cube in range(mesh.n_cubes):
        mesh.route(cube)
    if n_links is not None:
        for cube, ports in mesh.ports_used().items():
            if ports > n_links:
                raise MeshConfigError(f"Cube {cube} needs {ports} serial links, a cube has {n_links}")
    return mesh


def mesh_from_dict(data: Dict) -> MeshConfig:
    unknown = set(data) - _SCENARIO_KEYS
    if unknown:
        raise MeshConfigError(f"Unknown mesh scenario key(s): {', '.join(sorted(unknown))}")
    frame = data.get('frame', {})
    try:
        mesh = MeshConfig(
            name=data.get('name', 'mesh'),
            network=data.get('network', 'resnet152'),
            n_cubes=int(data.get('n_cubes', 4)),
            edges=tuple(tuple(int(v) for v in edge) for edge in data.get('edges', MeshConfig.edges)),
            host_cube=int(data.get('host_cube', 0)),
            frame_x=int(frame.get('x', 2816)),
            frame_y=int(frame.get('y', 2816)),
            frame_c=int(frame.get('c', 3)),
            bytes_per_channel=int(frame.get('bytes_per_channel', 1)),
            frame_rate=None if data.get('frame_rate') is None else float(data['frame_rate']),
            duration_s=float(data.get('duration_s', 300.0)),
            hardware_profile=data.get('hardware_profile', 'paper-baseline'),
        )
    except (TypeError, ValueError) as e:
        raise MeshConfigError(f"Malformed mesh scenario: {e}")
    if any(len(edge) != 2 for edge in mesh.edges):
        raise MeshConfigError("Mesh edges must be pairs of cube indices")
    return validate_mesh(mesh)


def load_mesh_config(path: str) -> MeshConfig:
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise MeshConfigError(f"Mesh scenario not found: {path}")
    except json.JSONDecodeError as e:
        raise MeshConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
    return mesh_from_dict(data)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass
class CubeStats:
    cube: int
    frames_done: int = 0
    busy_s: float = 0.0
    busy_since: Optional[float] = None


@dataclass
class MeshReport:
    """Aggregate results of a mesh run."""
    scenario: str
    network: str
    duration_s: float
    frame_bytes: int
    frame_time_s: float
    cube_gflops: float
    cubes: List[CubeStats]
    links: List[SerialLink]
    cube_power_w: float
    frames_generated: int
    frames_injected: int
    frames_delivered: int
    backlog: int
    host_cube: int = 0
    link_budget_w: Optional[float] = None

    @property
    def throughput_gflops(self) -> float:
        return sum(c.busy_s for c in self.cubes) * self.cube_gflops / self.duration_s

    @property
    def link_power_w(self) -> float:
        return sum(link.energy_j for link in self.links) / self.duration_s

    @property
    def power_w(self) -> float:
        return self.cube_power_w + self.link_power_w

    def cube_link_power_w(self) -> Dict[int, float]:
        """Average link power per cube: Link0 counts for the host cube, mesh links half for each end."""
        power = {c.cube: 0.0 for c in self.cubes}
        for link in self.links:
            watts = link.energy_j / self.duration_s
            ends = [int(e[4:]) for e in link.endpoints if e.startswith('cube')]
            if link.always_on:
                power[self.host_cube] += watts
                continue
            for cube in ends:
                power[cube] += watts / len(ends)
        return power

    def over_budget(self) -> List[int]:
        if self.link_budget_w is None:
            return []
        return [c for c, w in self.cube_link_power_w().items() if w > self.link_budget_w + 1e-9]

    @property
    def gflops_per_w(self) -> float:
        return self.throughput_gflops / self.power_w if self.power_w else 0.0

    @property
    def bytes_injected(self) -> int:
        return self.frames_injected * self.frame_bytes

    @property
    def bytes_delivered(self) -> int:
        return self.frames_delivered * self.frame_bytes

    @property
    def bytes_in_flight(self) -> int:
        return self.bytes_injected - self.bytes_delivered

    def link_rows(self) -> List[Dict]:
        rows = []
        for link in self.links:
            rows.append({
                'link': link.link_id,
                'endpoints': '-'.join(link.endpoints),
                'always_on': link.always_on,
                'duty_cycle': link.duty_cycle,
                'active_s': link.dwell[LinkPowerState.ACTIVE],
                'sleep_s': link.dwell[LinkPowerState.SLEEP],
                'powerdown_s': link.dwell[LinkPowerState.POWER_DOWN],
                'energy_j': link.energy_j,
                'bytes': link.bytes_moved,
                'data_rate_mbps': link.bytes_moved / self.duration_s / 1e6,
                'transitions': link.transitions,
            })
        return rows

    def timeline_rows(self) -> List[Dict]:
        events = sorted((t, lid, state) for link in self.links for t, lid, state in link.timeline)
        return [{'time_s': t, 'link': lid, 'state': state} for t, lid, state in events]

    def to_dict(self) -> Dict:
        return {
            'scenario': self.scenario,
            'network': self.network,
            'duration_s': self.duration_s,
            'frame_bytes': self.frame_bytes,
            'frame_time_s': self.frame_time_s,
            'cube_gflops': self.cube_gflops,
            'throughput_gflops': self.throughput_gflops,
            'power_w': self.power_w,
            'cube_power_w': self.cube_power_w,
            'link_power_w': self.link_power_w,
            'gflops_per_w': self.gflops_per_w,
            'frames_generated': self.frames_generated,
            'frames_injected': self.frames_injected,
            'frames_delivered': self.frames_delivered,
            'frames_completed': sum(c.frames_done for c in self.cubes),
            'backlog': self.backlog,
            'bytes_in_flight': self.bytes_in_flight,
            'link_budget_w': self.link_budget_w,
            'cubes': [{'cube': c.cube, 'frames_done': c.frames_done, 'busy_s': c.busy_s,
                       'busy_fraction': c.busy_s / self.duration_s,
                       'link_power_w': self.cube_link_power_w()[c.cube]} for c in self.cubes],
            'links': self.link_rows(),
        }


class MeshSimulation:
    """simpy model of cubes, links and the camera."""

    def __init__(self, mesh: MeshConfig, report: SimReport, profile: HardwareProfile):
        self.mesh = validate_mesh(mesh, profile.smc.n_links)
        self.report = report
        self.profile = profile
        self.env = simpy.Environment()
        self.frame_time = report.time_s

        cfg = profile.link
        self.host_link = SerialLink('Link0', ('camera', f'cube{mesh.host_cube}'), cfg,
                                    state=LinkPowerState.ACTIVE, always_on=True)
        self.links: Dict[Tuple[int, int], SerialLink] = {}
        for i, (a, b) in enumerate(mesh.edges, start=1):
            link = SerialLink(f'Link{i}', (f'cube{a}', f'cube{b}'), cfg)
            self.links[(a, b)] = link
            self.links[(b, a)] = link
        self.resources = {id(link): simpy.Resource(self.env, capacity=1) for link in self.all_links}

        self.cubes = [CubeStats(c) for c in range(mesh.n_cubes)]
        self.inbox = [simpy.Store(self.env) for _ in range(mesh.n_cubes)]
        self.slots = [simpy.Container(self.env, capacity=2, init=2) for _ in range(mesh.n_cubes)]
        self.camera = simpy.Store(self.env)
        self.routes = {c: [self.links[hop] for hop in mesh.route(c)] for c in range(mesh.n_cubes)}

        self.frames_generated = 0
        self.frames_injected = 0
        self.frames_delivered = 0

    @property
    def all_links(self) -> List[SerialLink]:
        unique = {id(link): link for link in self.links.values()}
        return [self.host_link] + sorted(unique.values(), key=lambda l: int(l.link_id[4:]))

    def _camera(self):
        interval = 1.0 / self.mesh.frame_rate
        while True:
            self.frames_generated += 1
            yield self.camera.put(self.frames_generated)
            yield self.env.timeout(interval)

    def _transfer(self, link: SerialLink, nbytes: int):
        resource = self.resources[id(link)]
        with resource.request() as request:
            yield request
            link.advance(self.env.now)
            step = step_link(link, LinkEvent.WAKE)
            if step.elapsed_s:
                yield self.env.timeout(step.elapsed_s)
            step = step_link(link, LinkEvent.TRANSFER, nbytes)
            yield self.env.timeout(step.elapsed_s)
            link.generation += 1
            generation = link.generation
        if not link.always_on:
            self.env.process(self._idle_watch(link, generation))

    def _idle_watch(self, link: SerialLink, generation: int):
        yield self.env.timeout(link.config.idle_timeout_s)
        if link.generation != generation:
            return
        with self.resources[id(link)].request() as request:
            yield request
            if link.generation != generation or link.state != LinkPowerState.ACTIVE:
                return
            link.advance(self.env.now)
            step = step_link(link, LinkEvent.SLEEP)
            yield self.env.timeout(step.elapsed_s)
            link.advance(self.env.now)
            step = step_link(link, LinkEvent.POWER_DOWN)
            yield self.env.timeout(step.elapsed_s)

    def _dispatcher(self, cube: int):
        nbytes = self.mesh.frame_bytes
        while True:
            yield self.slots[cube].get(1)
            if self.mesh.frame_rate is not None:
                frame = yield self.camera.get()
            else:
                self.frames_generated += 1
                frame = self.frames_generated
            self.frames_injected += 1
            for link in [self.host_link] + self.routes[cube]:
                yield from self._transfer(link, nbytes)
            self.frames_delivered += 1
            yield self.inbox[cube].put(frame)

    def _cube(self, cube: int):
        stats = self.cubes[cube]
        while True:
            yield self.inbox[cube].get()
            stats.busy_since = self.env.now
            yield self.env.timeout(self.frame_time)
            stats.busy_s += self.env.now - stats.busy_since
            stats.busy_since = None
            stats.frames_done += 1
            yield self.slots[cube].put(1)

    def run(self) -> MeshReport:
        if self.mesh.frame_rate is not None:
            self.env.process(self._camera())
        for cube in range(self.mesh.n_cubes):
            self.env.process(self._dispatcher(cube))
            self.env.process(self._cube(cube))
        horizon = self.mesh.duration_s
        self.env.run(until=horizon)

        for stats in self.cubes:
            if stats.busy_since is not None:
                stats.busy_s += horizon - stats.busy_since
        links = self.all_links
        for link in links:
            link.advance(horizon)

        energy = self.profile.energy
        busy_power = energy.cube_base_w + energy.neurocluster_w * self.report.pef * self.report.clock_hz / 1e9
        cube_energy = sum(c.busy_s * busy_power + (horizon - c.busy_s) * energy.cube_base_w for c in self.cubes)

        result = MeshReport(
            scenario=self.mesh.name, network=self.report.network, duration_s=horizon,
            frame_bytes=self.mesh.frame_bytes, frame_time_s=self.frame_time, cube_gflops=self.report.gflops,
            cubes=self.cubes, links=links, cube_power_w=cube_energy / horizon,
            frames_generated=self.frames_generated, frames_injected=self.frames_injected,
            frames_delivered=self.frames_delivered, backlog=len(self.camera.items),
            host_cube=self.mesh.host_cube, link_budget_w=energy.link_budget_w,
        )
        for cube in result.over_budget():
            log_warning(f"Cube {cube} links average {result.cube_link_power_w()[cube]:.2f} W, "
                        f"over the {energy.link_budget_w} W budget", 'simulate_stream')
        log_info(f"Mesh '{self.mesh.name}': {result.throughput_gflops:.1f} GFLOPS at {result.power_w:.2f} W, "
                 f"backlog {result.backlog}", 'simulate_stream')
        return result


def simulate_stream(mesh: MeshConfig, report: SimReport, profile: HardwareProfile,
                    duration_s: Optional[float] = None) -> MeshReport:
    """
    Stream camera frames through the mesh for `duration_s` seconds.

    Args:
        mesh: Topology and frame source
        report: Single-cube simulation of the network at the frame resolution
        profile: Hardware profile (link and energy constants)
        duration_s: Horizon override

    Returns:
        MeshReport: Throughput, power, per-link duty cycles and frame counters
    """
    if duration_s is not None:
        mesh = MeshConfig(**{**mesh.__dict__, 'duration_s': float(duration_s)})
    return MeshSimulation(mesh, report, profile).run()

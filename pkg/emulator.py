"""
Tiled functional execution of networks on one emulated NeuroCluster.

CONV/FC layers run tile by tile: augmented input blocks and coefficient
slices are DMA-copied into the SPM, every output element becomes an NST job
(STREAM_MAC over its receptive field) and the tile's outputs are copied
back. Outputs that feed a tiled convolution are written as raw/A/B/C
fragments straight into the consumer's augmented blocks. Pooling,
activation and element-wise layers stream through the NSTs on dense
tensors. Results are compared against the oracle.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from error_handling import InvariantViolation, log_info
from hardware import ClusterConfig, HardwareProfile
from models import LayerKind, LayerSpec, NetworkDescriptor
from nst import CommandKind, NeuroStream, NstCommand, NstConfig, SpmImage, WORD_BYTES, plan_spm_layout
from oracle import Params, oracle_forward, random_input, random_parameters, softmax
from tiling import Dims, Schedule, TileGrid, WritePlan, partition_tile, search_tiles, tile_layer, write_plan

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-5


def pack_blocks(grid: TileGrid, dense: np.ndarray) -> np.ndarray:
    """Lay a dense (C, Y, X) input out as the grid's augmented blocks (zero padded)."""
    px, py = grid.layer.padding
    padded = np.pad(np.asarray(dense, dtype=np.float32), ((0, 0), (py, py), (px, px)))
    buffer = np.zeros(grid.augmented_bytes // WORD_BYTES, dtype=np.float32)
    for (gx, gy, gci), (address, size) in grid.dram_layout.items():
        xt, yt = grid.x_tiles[gx], grid.y_tiles[gy]
        ci_lo, ci_hi = grid.ci_range(gci)
        block = padded[ci_lo:ci_hi, yt.aug_lo + py:yt.aug_hi + py, xt.aug_lo + px:xt.aug_hi + px]
        start = (address - grid.base_address) // WORD_BYTES
        buffer[start:start + size // WORD_BYTES] = block.ravel()
    return buffer


def apply_write_plan(plan: WritePlan, buffer: np.ndarray, source: Tuple[int, int, int],
                     values: np.ndarray, origin: Tuple[int, int, int]):
    """
    Scatter one output tile into the consumer's augmented buffer.

    Args:
        plan: Write plan of the producer grid into the consumer grid
        buffer: Consumer blocks, indexed in words from the consumer base address
        source: Producer dispatch unit (gx, gy, gco)
        values: Output tile (T_Co, T_Yo, T_Xo)
        origin: Global (c, y, x) of values[0, 0, 0]
    """
    c0, y0, x0 = origin
    base = plan.target.base_address
    for fragment in plan.for_source(*source):
        piece = values[fragment.c[0] - c0:fragment.c[1] - c0,
                       fragment.y[0] - y0:fragment.y[1] - y0,
                       fragment.x[0] - x0:fragment.x[1] - x0]
        buffer[(plan.element_addresses(fragment) - base) // WORD_BYTES] = piece.ravel()


def apply_padding(plan: WritePlan, buffer: np.ndarray):
    base = plan.target.base_address
    for fragment in plan.fragments:
        if fragment.kind == 'pad':
            buffer[(plan.element_addresses(fragment) - base) // WORD_BYTES] = 0.0


@dataclass
class LayerCheck:
    layer_id: str
    kind: str
    max_abs_error: float
    max_abs_reference: float
    tiled: bool = False

    @property
    def relative_error(self) -> float:
        return self.max_abs_error / max(self.max_abs_reference, np.finfo(np.float32).tiny)


@dataclass
class EmulationResult:
    network: str
    outputs: Dict[str, np.ndarray]
    reference: Dict[str, np.ndarray]
    checks: Dict[str, LayerCheck] = field(default_factory=dict)
    tiles: int = 0
    jobs: int = 0
    commands: int = 0
    stalls: int = 0

    @property
    def max_relative_error(self) -> float:
        return max((c.relative_error for c in self.checks.values()), default=0.0)

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_relative_error <= tolerance

    def require(self, tolerance: float = DEFAULT_TOLERANCE):
        worst = max(self.checks.values(), key=lambda c: c.relative_error, default=None)
        if worst is not None and worst.relative_error > tolerance:
            raise InvariantViolation(
                f"Tiled result of '{worst.layer_id}' deviates from the reference by "
                f"{worst.relative_error:.3g} (tolerance {tolerance:g})"
            )


class ClusterEmulator:
    """One cluster: a shared SPM image and its NSTs."""

    def __init__(self, cluster: ClusterConfig):
        self.cluster = cluster
        self.spm = SpmImage(cluster.spm_bytes, cluster.n_banks)
        self.nsts = [NeuroStream(self.spm, i, cluster.nst_queue_commands) for i in range(cluster.n_nst)]
        self.tiles = 0
        self.jobs = 0
        self.commands = 0

    @property
    def stalls(self) -> int:
        return sum(n.stalls for n in self.nsts)

    def _issue(self, nst: NeuroStream, commands: Sequence[NstCommand]):
        for command in commands:
            while not nst.issue(command):
                nst.step()
            self.commands += 1

    def _drain(self):
        for nst in self.nsts:
            nst.run()

    # -- convolution ------------------------------------------------------

    def _stage_input(self, grid: TileGrid, layout, augmented: np.ndarray, gx: int, gy: int, gci: int):
        xt, yt = grid.x_tiles[gx], grid.y_tiles[gy]
        ci_lo, ci_hi = grid.ci_range(gci)
        t_ci = ci_hi - ci_lo
        address, size = grid.dram_layout[(gx, gy, gci)]
        start = (address - grid.base_address) // WORD_BYTES
        block = augmented[start:start + size // WORD_BYTES].reshape(t_ci, yt.aug, xt.aug)
        rows = np.zeros((t_ci, yt.aug, layout.row_pitch), dtype=np.float32)
        rows[:, :, :xt.aug] = block
        staged = np.zeros((t_ci, layout.plane_pitch), dtype=np.float32)
        staged[:, :yt.aug * layout.row_pitch] = rows.reshape(t_ci, -1)
        self.spm.load(0, staged)

    def _run_jobs(self, layer: LayerSpec, tile, layout, bias: np.ndarray, reload: bool):
        kx, ky = layer.kernel
        sx, sy = layer.stride
        px, py = layer.padding
        off_x = tile.x.out_lo * sx - px - tile.x.aug_lo
        off_y = tile.y.out_lo * sy - py - tile.y.aug_lo
        jobs = partition_tile(tile, len(self.nsts))
        scratch = layout.end
        partials: Dict[Tuple[int, int, int], List[Tuple[int, int]]] = {}

        for i, job in enumerate(jobs):
            out_address = layout.out_offset(job.co, job.yo, job.xo) * WORD_BYTES
            init = 0.0 if (job.reduction or reload) else float(bias[job.co])
            config = NstConfig(
                agu0_base=layout.data_offset(job.ci_lo, job.yo * sy + off_y, job.xo * sx + off_x) * WORD_BYTES,
                agu0_steps=(1, layout.row_pitch, layout.plane_pitch),
                agu1_base=layout.coef_offset(job.co, job.ci_lo, 0, 0) * WORD_BYTES,
                agu1_steps=(1, kx, kx * ky),
                loops=(kx, ky, job.length),
                acc_init=init,
            )
            commands = [NstCommand(CommandKind.MEM_WRITE_CFG, config=config)]
            if job.reduction:
                target = (scratch + i) * WORD_BYTES
                partials.setdefault((job.co, job.yo, job.xo), []).append((job.ci_lo, target))
            else:
                target = out_address
                if reload:
                    commands.append(NstCommand(CommandKind.MEM_LOAD_ACC, address=out_address))
            commands.append(NstCommand(CommandKind.STREAM_MAC))
            commands.append(NstCommand(CommandKind.MEM_STORE_ACC, address=target))
            self._issue(self.nsts[job.nst], commands)
        self._drain()
        self.jobs += len(jobs)

        # PE-side reduction of split input channels, ascending slice order
        for (co, yo, xo), slices in partials.items():
            out_address = layout.out_offset(co, yo, xo) * WORD_BYTES
            acc = self.spm.read([out_address])[0] if reload else np.float32(bias[co])
            for _, address in sorted(slices):
                acc = np.float32(acc + self.spm.read([address])[0])
            self.spm.write([out_address], [acc])

    def _relu_region(self, address: int, count: int):
        config = NstConfig(agu0_base=address, agu0_steps=(1, 0, 0), loops=(count, 1, 1))
        self._issue(self.nsts[0], [NstCommand(CommandKind.MEM_WRITE_CFG, config=config),
                                   NstCommand(CommandKind.STREAM_MAX, operand=0.0)])
        self._drain()

    def run_conv(self, layer: LayerSpec, grid: TileGrid, params: Params, dense_input: np.ndarray,
                 augmented: Optional[np.ndarray] = None, relu: bool = False,
                 targets: Sequence[Tuple[WritePlan, np.ndarray]] = ()) -> Tuple[np.ndarray, np.ndarray]:
        """
        Execute a CONV/FC layer tile by tile.

        Returns:
            tuple: (layer output, output after the fused ReLU or the same array)
        """
        if augmented is None:
            augmented = pack_blocks(grid, dense_input)
        weights, bias = params[layer.id]
        out = layer.out_shape
        result = np.zeros((out.c, out.y, out.x), dtype=np.float32)
        activated = np.zeros_like(result) if relu else result
        nx, ny, nci, nco = grid.counts

        for gco in range(nco):
            co_lo, co_hi = grid.co_range(gco)
            for gy in range(ny):
                yt = grid.y_tiles[gy]
                if yt.out == 0:
                    continue
                for gx in range(nx):
                    xt = grid.x_tiles[gx]
                    if xt.out == 0:
                        continue
                    region = (slice(co_lo, co_hi), slice(yt.out_lo, yt.out_hi), slice(xt.out_lo, xt.out_hi))
                    for gci in range(nci):
                        tile = grid.tile(gx, gy, gci, gco)
                        layout = plan_spm_layout(xt.aug, yt.aug, tile.t_ci, tile.t_co, tile.t_xo, tile.t_yo,
                                                 layer.kernel, layer.stride, self.cluster.n_banks,
                                                 self.cluster.n_nst)
                        self._stage_input(grid, layout, augmented, gx, gy, gci)
                        self.spm.load(layout.coef_base * WORD_BYTES,
                                      weights[co_lo:co_hi, tile.ci_lo:tile.ci_hi])
                        if gci > 0:
                            self.spm.load(layout.out_base * WORD_BYTES, result[region])
                        self._run_jobs(layer, tile, layout, bias[co_lo:co_hi], reload=gci > 0)
                        count = tile.t_co * tile.t_yo * tile.t_xo
                        result[region] = self.spm.dump(layout.out_base * WORD_BYTES, count).reshape(
                            tile.t_co, tile.t_yo, tile.t_xo)
                        self.tiles += 1

                    values = result[region]
                    if relu:
                        self._relu_region(layout.out_base * WORD_BYTES, count)
                        values = self.spm.dump(layout.out_base * WORD_BYTES, count).reshape(values.shape)
                        activated[region] = values
                    for plan, buffer in targets:
                        apply_write_plan(plan, buffer, (gx, gy, gco), values, (co_lo, yt.out_lo, xt.out_lo))

        for plan, buffer in targets:
            apply_padding(plan, buffer)
        return result, activated

    # -- streamed layers --------------------------------------------------

    def max_pool(self, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
        kx, ky = layer.kernel
        sx, sy = layer.stride
        px, py = layer.padding
        out = layer.out_shape
        result = np.zeros((out.c, out.y, out.x), dtype=np.float32)
        for c in range(x.shape[0]):
            plane = np.pad(np.asarray(x[c], dtype=np.float32), ((py, py), (px, px)), constant_values=-np.inf)
            height, width = plane.shape
            out_base = height * width
            self.spm.load(0, plane)
            for yo in range(out.y):
                config = NstConfig(
                    agu0_base=yo * sy * width * WORD_BYTES,
                    agu0_steps=(1, width, sx),
                    agu1_base=(out_base + yo * out.x) * WORD_BYTES,
                    agu1_steps=(0, 0, 1),
                    loops=(kx, ky, out.x),
                )
                self._issue(self.nsts[yo % len(self.nsts)], [
                    NstCommand(CommandKind.MEM_WRITE_CFG, config=config),
                    NstCommand(CommandKind.STREAM_MAXPL),
                ])
            self._drain()
            result[c] = self.spm.dump(out_base * WORD_BYTES, out.x * out.y).reshape(out.y, out.x)
        return result

    def _chunks(self, total: int, operands: int):
        chunk = self.spm.size_bytes // WORD_BYTES // operands
        for start in range(0, total, chunk):
            yield start, min(chunk, total - start), chunk

    def _spread(self, kind: CommandKind, count: int, second: int = 0, operand: float = 0.0):
        """Split one element-wise stream of `count` words among the NSTs."""
        n = len(self.nsts)
        bounds = [count * i // n for i in range(n + 1)]
        for i, nst in enumerate(self.nsts):
            lo, hi = bounds[i], bounds[i + 1]
            if hi <= lo:
                continue
            config = NstConfig(agu0_base=lo * WORD_BYTES, agu0_steps=(1, 0, 0),
                               agu1_base=(second + lo) * WORD_BYTES, agu1_steps=(1, 0, 0),
                               loops=(hi - lo, 1, 1))
            self._issue(nst, [NstCommand(CommandKind.MEM_WRITE_CFG, config=config),
                              NstCommand(kind, operand=operand)])
        self._drain()

    def relu(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float32).ravel()
        result = np.empty_like(flat)
        for start, count, _ in self._chunks(flat.size, 1):
            self.spm.load(0, flat[start:start + count])
            self._spread(CommandKind.STREAM_MAX, count, operand=0.0)
            result[start:start + count] = self.spm.dump(0, count)
        return result.reshape(x.shape)

    def eltwise_add(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        total = np.asarray(inputs[0], dtype=np.float32).ravel().copy()
        for other in inputs[1:]:
            flat = np.asarray(other, dtype=np.float32).ravel()
            for start, count, chunk in self._chunks(total.size, 2):
                self.spm.load(0, total[start:start + count])
                self.spm.load(chunk * WORD_BYTES, flat[start:start + count])
                self._spread(CommandKind.STREAM_SUM, count, second=chunk)
                total[start:start + count] = self.spm.dump(0, count)
        return total.reshape(inputs[0].shape)


def _relu_chain(layer: LayerSpec, consumers: Dict[str, List[LayerSpec]]) -> List[LayerSpec]:
    chain = []
    end = layer
    while len(consumers.get(end.id, [])) == 1 and consumers[end.id][0].kind == LayerKind.ACT:
        end = consumers[end.id][0]
        chain.append(end)
    return chain


def emulate_network(net: NetworkDescriptor, profile: HardwareProfile,
                    tiling: Union[Schedule, Dict[str, Dims], None] = None,
                    params: Optional[Params] = None, x: Optional[np.ndarray] = None,
                    seed: int = 0) -> EmulationResult:
    """
    Execute a network tile by tile and compare every layer with the oracle.

    Args:
        net: Network with inferred shapes (toy sizes; the emulator is slow)
        profile: Hardware profile providing the cluster
        tiling: Schedule or layer id -> dims; searched when omitted
        params: Layer parameters; random (seeded) when omitted
        x: Input volume (C, Y, X); random (seeded) when omitted
        seed: Seed for generated parameters and input

    Returns:
        EmulationResult: Outputs, oracle outputs and per-layer error checks
    """
    if tiling is None:
        tiling = search_tiles(net, profile)
    dims = {lid: entry.dims for lid, entry in tiling.layers.items()} if isinstance(tiling, Schedule) else dict(tiling)
    params = params if params is not None else random_parameters(net, seed)
    x = x if x is not None else random_input(net.input_shape, seed)

    reference = oracle_forward(net, x, params)
    emulator = ClusterEmulator(profile.cluster)
    consumers = net.consumers()
    outputs: Dict[str, np.ndarray] = {'input': np.asarray(x, dtype=np.float32)}
    augmented: Dict[str, np.ndarray] = {}
    tiled = set()

    for layer in net.layers:
        if layer.id in outputs:
            continue
        inputs = [outputs[src] for src in layer.inputs]
        if layer.is_weighted:
            grid = tile_layer(layer, dims[layer.id])
            chain = _relu_chain(layer, consumers)
            end = chain[-1] if chain else layer
            targets = []
            for consumer in consumers.get(end.id, []):
                if consumer.kind == LayerKind.CONV and consumer.id in dims:
                    next_grid = tile_layer(consumer, dims[consumer.id])
                    buffer = np.zeros(next_grid.augmented_bytes // WORD_BYTES, dtype=np.float32)
                    targets.append((consumer.id, write_plan(grid, next_grid), buffer))
            result, activated = emulator.run_conv(
                layer, grid, params, inputs[0], augmented.pop(layer.id, None), relu=bool(chain),
                targets=[(plan, buffer) for _, plan, buffer in targets],
            )
            outputs[layer.id] = result
            for act in chain:
                outputs[act.id] = activated
            for consumer_id, _, buffer in targets:
                augmented[consumer_id] = buffer
            tiled.add(layer.id)
        elif layer.kind == LayerKind.POOL:
            outputs[layer.id] = emulator.max_pool(layer, inputs[0])
        elif layer.kind == LayerKind.ACT:
            outputs[layer.id] = emulator.relu(inputs[0])
        elif layer.kind == LayerKind.ELTWISE_ADD:
            outputs[layer.id] = emulator.eltwise_add(inputs)
        elif layer.kind == LayerKind.CONCAT:
            outputs[layer.id] = np.concatenate(inputs, axis=0)
        elif layer.kind == LayerKind.CLASS:
            outputs[layer.id] = softmax(inputs[0].astype(np.float64)).astype(np.float32)

    result = EmulationResult(network=net.name, outputs=outputs, reference=reference,
                             tiles=emulator.tiles, jobs=emulator.jobs, commands=emulator.commands,
                             stalls=emulator.stalls)
    for layer in net.layers:
        diff = np.abs(outputs[layer.id].astype(np.float64) - reference[layer.id])
        result.checks[layer.id] = LayerCheck(
            layer_id=layer.id, kind=layer.kind.value,
            max_abs_error=float(diff.max()), max_abs_reference=float(np.abs(reference[layer.id]).max()),
            tiled=layer.id in tiled,
        )
    log_info(f"Emulated '{net.name}': {result.tiles} tiles, {result.jobs} NST jobs, "
             f"max relative error {result.max_relative_error:.3g}", 'emulate_network')
    return result

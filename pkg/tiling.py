"""
4D tiling of convolutional layers.

A layer is cut into (T_Xi, T_Yi, T_Ci, T_Co) tiles. Every spatial tile is
stored in DRAM as an augmented block (raw pixels plus the halo and zero
padding its outputs need), so one DMA request fetches everything a tile
reads. This module builds tile grids and their DRAM layout, plans the
raw/A/B/C fragment writes that turn one layer's output tiles into the next
layer's augmented blocks, estimates tile costs, partitions tiles among the
NSTs of a cluster and searches tile dimensions for whole networks.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import repeat
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from error_handling import InfeasibleError, UserInputError, log_info
from hardware import HardwareProfile
from model import layer_macs, storage_report
from models import LayerKind, LayerSpec, NetworkDescriptor, Shape3D

logger = logging.getLogger(__name__)

Dims = Tuple[int, int, int, int]


class TilingError(UserInputError):
    """Raised for tile dimensions outside the layer bounds."""
    pass


class WritePlanError(UserInputError):
    """Raised when two grids cannot be chained by a write plan."""
    pass


class TilingInfeasibleError(InfeasibleError):
    """Raised when no candidate tiling fits the scratchpad."""

    def __init__(self, failures: Dict[str, int], spm_bytes: int):
        self.failures = failures
        self.spm_bytes = spm_bytes
        detail = '; '.join(
            f"{layer_id}: smallest footprint {footprint} B" for layer_id, footprint in failures.items()
        )
        super().__init__(f"No tiling fits {spm_bytes} B of SPM for {len(failures)} layer(s): {detail}")


# ---------------------------------------------------------------------------
# Axis geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AxisTile:
    """One tile along a spatial axis, in input coordinates."""
    index: int
    lo: int
    hi: int
    out_lo: int
    out_hi: int
    halo_lo: int
    halo_hi: int
    pad_lo: int
    pad_hi: int

    @property
    def raw(self) -> int:
        return self.hi - self.lo

    @property
    def out(self) -> int:
        return self.out_hi - self.out_lo

    @property
    def aug(self) -> int:
        return self.raw + self.halo_lo + self.halo_hi + self.pad_lo + self.pad_hi

    @property
    def aug_lo(self) -> int:
        """First input coordinate held by the augmented tile (negative inside padding)."""
        return self.lo - self.halo_lo - self.pad_lo

    @property
    def aug_hi(self) -> int:
        return self.hi + self.halo_hi + self.pad_hi


@dataclass
class AxisSummary:
    """Vectorized geometry of all tiles along one axis."""
    n_in: int
    n_out: int
    size: int
    lo: np.ndarray
    hi: np.ndarray
    out_lo: np.ndarray
    out_hi: np.ndarray
    halo_lo: np.ndarray
    halo_hi: np.ndarray
    pad_lo: np.ndarray
    pad_hi: np.ndarray

    @property
    def count(self) -> int:
        return len(self.lo)

    @property
    def aug(self) -> np.ndarray:
        return (self.hi - self.lo) + self.halo_lo + self.halo_hi + self.pad_lo + self.pad_hi

    @property
    def out(self) -> np.ndarray:
        return self.out_hi - self.out_lo

    @property
    def sum_aug(self) -> int:
        return int(self.aug.sum())

    @property
    def owning(self) -> np.ndarray:
        """Mask of tiles that own at least one output; only these are dispatched."""
        return self.out > 0

    @property
    def owning_count(self) -> int:
        return int(self.owning.sum())

    @property
    def owning_sum_aug(self) -> int:
        return int(self.aug[self.owning].sum())

    @property
    def owning_sum_raw(self) -> int:
        return int((self.hi - self.lo)[self.owning].sum())

    @property
    def max_aug(self) -> int:
        return int(self.aug.max())

    @property
    def max_out(self) -> int:
        return int(self.out.max())

    def tiles(self) -> List[AxisTile]:
        return [
            AxisTile(i, int(self.lo[i]), int(self.hi[i]), int(self.out_lo[i]), int(self.out_hi[i]),
                     int(self.halo_lo[i]), int(self.halo_hi[i]), int(self.pad_lo[i]), int(self.pad_hi[i]))
            for i in range(self.count)
        ]


@lru_cache(maxsize=4096)
def axis_summary(n_in: int, n_out: int, kernel: int, stride: int, pad: int, size: int) -> AxisSummary:
    """
    Split one axis of n_in input pixels into tiles of `size`.

    Output o belongs to the tile whose raw range holds its anchor
    o*stride - pad + (kernel-1)//2, clipped to the first/last tile. Each
    tile keeps the halo (pixels of neighbouring tiles) and the zero padding
    its outputs read; tiles that own no output keep just their raw pixels.
    """
    count = -(-n_in // size)
    index = np.arange(count)
    lo = index * size
    hi = np.minimum(lo + size, n_in)

    outputs = np.arange(n_out)
    anchor = outputs * stride - pad + (kernel - 1) // 2
    owner = np.clip(np.floor_divide(anchor, size), 0, count - 1)
    out_lo = np.searchsorted(owner, index, side='left')
    out_hi = np.searchsorted(owner, index, side='right')
    has_out = out_hi > out_lo

    need_lo = out_lo * stride - pad
    need_hi = (out_hi - 1) * stride - pad + kernel
    zero = np.zeros(count, dtype=np.int64)
    pad_lo = np.where(has_out, np.maximum(0, -need_lo), zero)
    pad_hi = np.where(has_out, np.maximum(0, need_hi - n_in), zero)
    halo_lo = np.where(has_out, np.maximum(0, lo - np.maximum(need_lo, 0)), zero)
    halo_hi = np.where(has_out, np.maximum(0, np.minimum(need_hi, n_in) - hi), zero)

    return AxisSummary(n_in, n_out, size, lo, hi, out_lo, out_hi, halo_lo, halo_hi, pad_lo, pad_hi)


def split_axis(n_in: int, n_out: int, kernel: int, stride: int, pad: int, size: int) -> List[AxisTile]:
    """Tiles along one axis as AxisTile records."""
    return axis_summary(n_in, n_out, kernel, stride, pad, size).tiles()


# ---------------------------------------------------------------------------
# Tiles and grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tile4D:
    """One (T_Xi, T_Yi, T_Ci, T_Co) tile of a layer."""
    layer_id: str
    index: Tuple[int, int, int, int]
    x: AxisTile
    y: AxisTile
    ci_lo: int
    ci_hi: int
    co_lo: int
    co_hi: int
    kernel: Tuple[int, int]
    stride: Tuple[int, int]
    in_channels: int
    out_channels: int
    bias: bool = True
    element_bytes: int = 4

    @property
    def t_xi(self) -> int:
        return self.x.raw

    @property
    def t_yi(self) -> int:
        return self.y.raw

    @property
    def t_xo(self) -> int:
        return self.x.out

    @property
    def t_yo(self) -> int:
        return self.y.out

    @property
    def t_ci(self) -> int:
        return self.ci_hi - self.ci_lo

    @property
    def t_co(self) -> int:
        return self.co_hi - self.co_lo

    @property
    def halo(self) -> Tuple[int, int, int, int]:
        """Halo widths (left, right, top, bottom)."""
        return (self.x.halo_lo, self.x.halo_hi, self.y.halo_lo, self.y.halo_hi)

    @property
    def pad(self) -> Tuple[int, int, int, int]:
        return (self.x.pad_lo, self.x.pad_hi, self.y.pad_lo, self.y.pad_hi)

    @property
    def aug_x(self) -> int:
        return self.x.aug

    @property
    def aug_y(self) -> int:
        return self.y.aug

    @property
    def output_units(self) -> int:
        return self.t_xo * self.t_yo * self.t_co

    @property
    def macs(self) -> int:
        return self.output_units * self.kernel[0] * self.kernel[1] * self.t_ci

    @property
    def footprint_bytes(self) -> int:
        """Ping-pong SPM bytes: two copies of input, output and coefficient buffers."""
        kx, ky = self.kernel
        words = (self.aug_x * self.aug_y * self.t_ci + self.output_units
                 + kx * ky * self.t_ci * self.t_co + (self.t_co if self.bias else 0))
        return 2 * words * self.element_bytes

    @property
    def reloads_partials(self) -> bool:
        """True when input channels are split across tiles (partial sums go back to DRAM)."""
        return self.t_ci < self.in_channels


def _check_dims(layer: LayerSpec, dims: Dims):
    if layer.out_shape is None:
        raise TilingError(f"Layer '{layer.id}' has no inferred shapes")
    if not layer.is_weighted:
        raise TilingError(f"Layer '{layer.id}' ({layer.kind.value}) is not tiled on its own")
    if len(dims) != 4:
        raise TilingError(f"Tile dimensions must be (T_Xi, T_Yi, T_Ci, T_Co), got {dims}")
    bounds = (layer.in_shape.x, layer.in_shape.y, layer.in_shape.c, layer.out_shape.c)
    for name, value, bound in zip(('T_Xi', 'T_Yi', 'T_Ci', 'T_Co'), dims, bounds):
        if not 1 <= value <= bound:
            raise TilingError(f"Layer '{layer.id}': {name}={value} outside [1, {bound}]")
    if layer.kind == LayerKind.FC and (dims[0], dims[1]) != (bounds[0], bounds[1]):
        raise TilingError(f"Layer '{layer.id}': FC layers are tiled with the full spatial extent")


def _axes(layer: LayerSpec, dims: Dims) -> Tuple[AxisSummary, AxisSummary]:
    kx, ky = layer.kernel
    sx, sy = layer.stride
    px, py = layer.padding
    ax = axis_summary(layer.in_shape.x, layer.out_shape.x, kx, sx, px, dims[0])
    ay = axis_summary(layer.in_shape.y, layer.out_shape.y, ky, sy, py, dims[1])
    return ax, ay


@dataclass
class TileGrid:
    """
    All tiles of one layer plus the DRAM layout of its augmented input blocks.

    Blocks (gx, gy, gci) are stored back to back in (gy, gx, gci) order, each
    laid out [c][y][x] over its augmented extent.
    """
    layer: LayerSpec
    dims: Dims
    x_tiles: List[AxisTile]
    y_tiles: List[AxisTile]
    base_address: int = 0
    element_bytes: int = 4
    dram_layout: Dict[Tuple[int, int, int], Tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.dram_layout:
            address = self.base_address
            for gy in range(len(self.y_tiles)):
                for gx in range(len(self.x_tiles)):
                    for gci in range(self.n_ci):
                        size = self.block_bytes(gx, gy, gci)
                        self.dram_layout[(gx, gy, gci)] = (address, size)
                        address += size

    @property
    def layer_id(self) -> str:
        return self.layer.id

    @property
    def n_ci(self) -> int:
        return -(-self.layer.in_shape.c // self.dims[2])

    @property
    def n_co(self) -> int:
        return -(-self.layer.out_shape.c // self.dims[3])

    @property
    def counts(self) -> Tuple[int, int, int, int]:
        return (len(self.x_tiles), len(self.y_tiles), self.n_ci, self.n_co)

    def ci_range(self, gci: int) -> Tuple[int, int]:
        lo = gci * self.dims[2]
        return lo, min(lo + self.dims[2], self.layer.in_shape.c)

    def co_range(self, gco: int) -> Tuple[int, int]:
        lo = gco * self.dims[3]
        return lo, min(lo + self.dims[3], self.layer.out_shape.c)

    def block_bytes(self, gx: int, gy: int, gci: int) -> int:
        lo, hi = self.ci_range(gci)
        return self.x_tiles[gx].aug * self.y_tiles[gy].aug * (hi - lo) * self.element_bytes

    def block_address(self, gx: int, gy: int, gci: int) -> int:
        return self.dram_layout[(gx, gy, gci)][0]

    def element_address(self, gx: int, gy: int, gci: int, c: int, y: int, x: int) -> int:
        """Byte address of input element (c, y, x) inside block (gx, gy, gci); y/x may lie in padding."""
        xt, yt = self.x_tiles[gx], self.y_tiles[gy]
        ci_lo, _ = self.ci_range(gci)
        offset = ((c - ci_lo) * yt.aug + (y - yt.aug_lo)) * xt.aug + (x - xt.aug_lo)
        return self.block_address(gx, gy, gci) + offset * self.element_bytes

    @property
    def augmented_bytes(self) -> int:
        return sum(size for _, size in self.dram_layout.values())

    @property
    def raw_bytes(self) -> int:
        return self.layer.in_shape.elements * self.element_bytes

    @property
    def end_address(self) -> int:
        return self.base_address + self.augmented_bytes

    def tile(self, gx: int, gy: int, gci: int, gco: int) -> Tile4D:
        ci_lo, ci_hi = self.ci_range(gci)
        co_lo, co_hi = self.co_range(gco)
        return Tile4D(
            layer_id=self.layer.id,
            index=(gx, gy, gci, gco),
            x=self.x_tiles[gx],
            y=self.y_tiles[gy],
            ci_lo=ci_lo, ci_hi=ci_hi, co_lo=co_lo, co_hi=co_hi,
            kernel=self.layer.kernel,
            stride=self.layer.stride,
            in_channels=self.layer.in_shape.c,
            out_channels=self.layer.out_shape.c,
            bias=self.layer.bias,
            element_bytes=self.element_bytes,
        )

    def iter_tiles(self) -> Iterator[Tile4D]:
        nx, ny, nci, nco = self.counts
        for gco in range(nco):
            for gy in range(ny):
                for gx in range(nx):
                    for gci in range(nci):
                        yield self.tile(gx, gy, gci, gco)

    @property
    def tiles(self) -> List[Tile4D]:
        return list(self.iter_tiles())

    def read_trace(self, coefficient_base: int = 0) -> Iterator[Tuple[Tuple[int, int, int], str, int, int]]:
        """
        DMA reads of every dispatch unit (gx, gy, gco).

        Yields:
            (unit, 'input' | 'coef', address, size_bytes)
        """
        nx, ny, nci, nco = self.counts
        kx, ky = self.layer.kernel
        ci = self.layer.in_shape.c
        for gco in range(nco):
            co_lo, co_hi = self.co_range(gco)
            t_co = co_hi - co_lo
            for gy in range(ny):
                for gx in range(nx):
                    if self.x_tiles[gx].out == 0 or self.y_tiles[gy].out == 0:
                        continue
                    unit = (gx, gy, gco)
                    for gci in range(nci):
                        yield unit, 'input', self.block_address(gx, gy, gci), self.block_bytes(gx, gy, gci)
                    coef = kx * ky * ci * t_co + (t_co if self.layer.bias else 0)
                    address = coefficient_base + co_lo * (kx * ky * ci + (1 if self.layer.bias else 0)) * self.element_bytes
                    yield unit, 'coef', address, coef * self.element_bytes

    def __repr__(self):
        return f"<TileGrid(layer='{self.layer.id}', dims={self.dims}, counts={self.counts})>"


def tile_layer(layer: LayerSpec, dims: Dims, base_address: int = 0) -> TileGrid:
    """
    Build the tile grid of a CONV/FC layer.

    Args:
        layer: Layer with inferred shapes
        dims: (T_Xi, T_Yi, T_Ci, T_Co)
        base_address: DRAM address of the first augmented block

    Returns:
        TileGrid: Grid covering the layer; SPM fit is not checked here

    Raises:
        TilingError: If dims fall outside the layer bounds
    """
    dims = tuple(int(d) for d in dims)
    _check_dims(layer, dims)
    ax, ay = _axes(layer, dims)
    return TileGrid(layer=layer, dims=dims, x_tiles=ax.tiles(), y_tiles=ay.tiles(),
                    base_address=base_address, element_bytes=layer.element_bytes)


def storage_overhead(grid: TileGrid) -> float:
    """Augmented over raw input bytes, minus one."""
    return grid.augmented_bytes / grid.raw_bytes - 1.0


def representative_tile(layer: LayerSpec, dims: Dims) -> Tile4D:
    """The first tile (0, 0, 0, 0) of a layer, without building the whole grid."""
    dims = tuple(int(d) for d in dims)
    _check_dims(layer, dims)
    ax, ay = _axes(layer, dims)
    grid = TileGrid(layer=layer, dims=dims, x_tiles=[ax.tiles()[0]], y_tiles=[ay.tiles()[0]],
                    element_bytes=layer.element_bytes, dram_layout={(0, 0, 0): (0, 0)})
    return grid.tile(0, 0, 0, 0)


# ---------------------------------------------------------------------------
# Write plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WriteFragment:
    """
    One DMA write into DRAM.

    kind is 'raw' (the target block's own pixels), 'A' (left/right halo),
    'B' (top/bottom halo), 'C' (corner halo) or 'pad' (border zeros).
    Ranges are half-open global coordinates of the target layer's input.
    """
    kind: str
    source: Optional[Tuple[int, int, int]]
    target: Optional[Tuple[int, int, int]]
    x: Tuple[int, int]
    y: Tuple[int, int]
    c: Tuple[int, int]
    address: int
    size_bytes: int


@dataclass
class WritePlan:
    """All writes that materialize one layer's output in DRAM."""
    source: TileGrid
    target: Optional[TileGrid]
    fragments: List[WriteFragment]
    element_bytes: int = 4

    def bytes_of(self, *kinds: str) -> int:
        return sum(f.size_bytes for f in self.fragments if f.kind in kinds)

    @property
    def raw_bytes(self) -> int:
        return self.bytes_of('raw')

    @property
    def fragment_bytes(self) -> int:
        return self.bytes_of('A', 'B', 'C')

    @property
    def pad_bytes(self) -> int:
        return self.bytes_of('pad')

    @property
    def total_bytes(self) -> int:
        return sum(f.size_bytes for f in self.fragments)

    def for_source(self, gx: int, gy: int, gco: int) -> List[WriteFragment]:
        return [f for f in self.fragments if f.source == (gx, gy, gco)]

    def element_addresses(self, fragment: WriteFragment) -> np.ndarray:
        """Byte address of every element a fragment writes."""
        cs = np.arange(*fragment.c)
        ys = np.arange(*fragment.y)
        xs = np.arange(*fragment.x)
        c, y, x = np.meshgrid(cs, ys, xs, indexing='ij')
        eb = self.element_bytes
        if self.target is None:
            out = self.source.layer.out_shape
            offset = (c * out.y + y) * out.x + x
            return (self.source.end_address + offset * eb).ravel()
        gx, gy, gci = fragment.target
        xt, yt = self.target.x_tiles[gx], self.target.y_tiles[gy]
        ci_lo, _ = self.target.ci_range(gci)
        offset = ((c - ci_lo) * yt.aug + (y - yt.aug_lo)) * xt.aug + (x - xt.aug_lo)
        return (self.target.block_address(gx, gy, gci) + offset * eb).ravel()


def _pieces(tile: AxisTile, extent: int) -> List[Tuple[int, int, bool]]:
    """In-bounds parts of an augmented range: (lo, hi, is_raw)."""
    parts = [
        (max(tile.aug_lo, 0), tile.lo, False),
        (tile.lo, tile.hi, True),
        (tile.hi, min(tile.aug_hi, extent), False),
    ]
    return [(lo, hi, raw) for lo, hi, raw in parts if hi > lo]


def _fragment_kind(x_raw: bool, y_raw: bool) -> str:
    if x_raw and y_raw:
        return 'raw'
    if y_raw:
        return 'A'
    if x_raw:
        return 'B'
    return 'C'


def write_plan(grid: TileGrid, next_grid: Optional[TileGrid] = None) -> WritePlan:
    """
    Plan the DMA writes that turn output tiles into the next layer's blocks.

    Every output tile writes, for each next-layer block it touches, one
    contiguous raw fragment plus A/B/C fragments for neighbour halos. Zero
    padding at the layer border is written once per block as 'pad'
    fragments. Without a next grid the plan holds raw writes into a dense
    [c][y][x] output buffer placed right after the source blocks.

    Args:
        grid: Producer grid
        next_grid: Consumer grid, or None

    Returns:
        WritePlan: Fragments in producer-tile order, padding last

    Raises:
        WritePlanError: If the consumer does not read the producer's output volume
    """
    out = grid.layer.out_shape
    eb = grid.element_bytes
    fragments: List[WriteFragment] = []
    nx, ny, _, nco = grid.counts

    if next_grid is not None:
        target_in = next_grid.layer.in_shape
        if target_in != out:
            raise WritePlanError(
                f"Layer '{next_grid.layer.id}' reads {target_in} but '{grid.layer.id}' produces {out}"
            )

    for gco in range(nco):
        co = grid.co_range(gco)
        for gy in range(ny):
            oy = (grid.y_tiles[gy].out_lo, grid.y_tiles[gy].out_hi)
            if oy[1] <= oy[0]:
                continue
            for gx in range(nx):
                ox = (grid.x_tiles[gx].out_lo, grid.x_tiles[gx].out_hi)
                if ox[1] <= ox[0]:
                    continue
                source = (gx, gy, gco)
                if next_grid is None:
                    offset = (co[0] * out.y + oy[0]) * out.x + ox[0]
                    size = (co[1] - co[0]) * (oy[1] - oy[0]) * (ox[1] - ox[0]) * eb
                    fragments.append(WriteFragment('raw', source, None, ox, oy, co,
                                                   grid.end_address + offset * eb, size))
                    continue
                fragments.extend(_fragments_into(next_grid, source, ox, oy, co))

    if next_grid is not None:
        fragments.extend(_padding_fragments(next_grid))

    return WritePlan(source=grid, target=next_grid, fragments=fragments, element_bytes=eb)


def _fragments_into(target: TileGrid, source, ox, oy, co) -> List[WriteFragment]:
    extent_x, extent_y = target.layer.in_shape.x, target.layer.in_shape.y
    result = []
    for bgci in range(target.n_ci):
        ci = target.ci_range(bgci)
        c = (max(co[0], ci[0]), min(co[1], ci[1]))
        if c[1] <= c[0]:
            continue
        for bgy, yt in enumerate(target.y_tiles):
            if yt.aug_hi <= oy[0] or yt.aug_lo >= oy[1]:
                continue
            for bgx, xt in enumerate(target.x_tiles):
                if xt.aug_hi <= ox[0] or xt.aug_lo >= ox[1]:
                    continue
                for ylo, yhi, y_raw in _pieces(yt, extent_y):
                    y = (max(ylo, oy[0]), min(yhi, oy[1]))
                    if y[1] <= y[0]:
                        continue
                    for xlo, xhi, x_raw in _pieces(xt, extent_x):
                        x = (max(xlo, ox[0]), min(xhi, ox[1]))
                        if x[1] <= x[0]:
                            continue
                        address = target.element_address(bgx, bgy, bgci, c[0], y[0], x[0])
                        size = (c[1] - c[0]) * (y[1] - y[0]) * (x[1] - x[0]) * target.element_bytes
                        result.append(WriteFragment(_fragment_kind(x_raw, y_raw), source,
                                                    (bgx, bgy, bgci), x, y, c, address, size))
    return result


def _padding_fragments(target: TileGrid) -> List[WriteFragment]:
    extent_x, extent_y = target.layer.in_shape.x, target.layer.in_shape.y
    result = []
    for (bgx, bgy, bgci) in target.dram_layout:
        xt, yt = target.x_tiles[bgx], target.y_tiles[bgy]
        c = target.ci_range(bgci)
        inner_y = (max(yt.aug_lo, 0), min(yt.aug_hi, extent_y))
        bands = [
            ((xt.aug_lo, xt.aug_hi), (yt.aug_lo, min(0, yt.aug_hi))),
            ((xt.aug_lo, xt.aug_hi), (max(extent_y, yt.aug_lo), yt.aug_hi)),
            ((xt.aug_lo, min(0, xt.aug_hi)), inner_y),
            ((max(extent_x, xt.aug_lo), xt.aug_hi), inner_y),
        ]
        for x, y in bands:
            if x[1] <= x[0] or y[1] <= y[0]:
                continue
            address = target.element_address(bgx, bgy, bgci, c[0], y[0], x[0])
            size = (c[1] - c[0]) * (y[1] - y[0]) * (x[1] - x[0]) * target.element_bytes
            result.append(WriteFragment('pad', None, (bgx, bgy, bgci), x, y, c, address, size))
    return result


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------

@dataclass
class TileCost:
    """Traffic, footprint and estimated time of one layer under given tile dims."""
    oi: float
    read_bytes: int
    write_bytes: int
    footprint_bytes: int
    batches: int
    est_cycles: float
    dispatch_units: int
    epochs: int
    halo_bytes: int

    def to_dict(self) -> Dict:
        return {
            'oi_flop_per_byte': self.oi,
            'read_bytes': self.read_bytes,
            'write_bytes': self.write_bytes,
            'footprint_bytes': self.footprint_bytes,
            'batches': self.batches,
            'est_cycles': self.est_cycles,
            'dispatch_units': self.dispatch_units,
            'epochs': self.epochs,
            'halo_bytes': self.halo_bytes,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'TileCost':
        return cls(
            oi=data['oi_flop_per_byte'], read_bytes=data['read_bytes'], write_bytes=data['write_bytes'],
            footprint_bytes=data['footprint_bytes'], batches=data['batches'],
            est_cycles=data['est_cycles'], dispatch_units=data['dispatch_units'],
            epochs=data['epochs'], halo_bytes=data['halo_bytes'],
        )


def _prior(layer: LayerSpec, profile: HardwareProfile, max_aug_x, max_aug_y, max_out_x, max_out_y,
           n_x, n_y, sum_aug_x, sum_aug_y, sum_raw_x, sum_raw_y, tci, tco):
    """
    Analytic estimate of a layer's cycles; all array arguments broadcast.

    Tile counts and sums cover only the tiles that own outputs.

    Returns:
        tuple: (est_cycles, footprint_bytes, read_bytes, halo_bytes, dispatch_units, epochs, batches)
    """
    smc = profile.smc
    cluster = smc.cluster
    eb = layer.element_bytes
    kx, ky = layer.kernel
    ci, co = layer.in_shape.c, layer.out_shape.c
    bias = 1 if layer.bias else 0
    bw = smc.dram_bytes_per_cycle

    nci = -(-ci // tci)
    nco = -(-co // tco)
    footprint = 2 * (max_aug_x * max_aug_y * tci + max_out_x * max_out_y * tco + kx * ky * tci * tco + bias * tco) * eb

    units = n_x * n_y * nco
    epochs = -(-units // smc.n_clusters)
    jobs = max_out_x * max_out_y * tco
    batches = -(-jobs // cluster.n_nst)
    stream = kx * ky * tci
    commands = np.where(nci > 1, 3, 2)
    issue = commands * cluster.issue_cycles * (cluster.n_nst / cluster.n_pe)
    job = np.maximum(stream + cluster.nst_startup_cycles + 2, issue)
    unit_cycles = nci * (batches * job + cluster.loop_setup_cycles)

    unit_bytes = (max_aug_x * max_aug_y * ci + kx * ky * ci * tco + max_out_x * max_out_y * tco) * eb
    active = np.minimum(units, smc.n_clusters)
    dma = active * unit_bytes / bw + active * smc.fragment_cycles(nci)

    halo = (sum_aug_x * sum_aug_y - sum_raw_x * sum_raw_y) * ci * nco * eb
    est = epochs * np.maximum(unit_cycles, dma) + cluster.barrier_cycles + profile.search.halo_traffic_weight * halo / bw

    reads = nco * sum_aug_x * sum_aug_y * ci * eb + n_x * n_y * (kx * ky * ci * co + bias * co) * eb
    return est, footprint, reads, halo, units, epochs, batches


def tile_cost(layer: LayerSpec, dims: Dims, profile: HardwareProfile,
              next_grid: Optional[TileGrid] = None) -> TileCost:
    """
    Cost of running a layer with the given tile dimensions.

    Reads count the augmented input blocks of every tile that owns outputs
    once per output-channel slice, and the coefficients once per such
    spatial tile; tiles smaller than the stride may own none and are never
    dispatched. Writes are the consumer's
    augmented blocks when a consumer grid is given, else the raw output.

    Args:
        layer: CONV/FC layer with shapes
        dims: (T_Xi, T_Yi, T_Ci, T_Co)
        profile: Hardware profile
        next_grid: Grid of the consuming layer, if tiled

    Returns:
        TileCost: OI, traffic, ping-pong footprint and estimated cycles
    """
    dims = tuple(int(d) for d in dims)
    _check_dims(layer, dims)
    ax, ay = _axes(layer, dims)
    tci = min(dims[2], layer.in_shape.c)
    tco = min(dims[3], layer.out_shape.c)
    est, footprint, reads, halo, units, epochs, batches = _prior(
        layer, profile, ax.max_aug, ay.max_aug, ax.max_out, ay.max_out,
        ax.owning_count, ay.owning_count, ax.owning_sum_aug, ay.owning_sum_aug,
        ax.owning_sum_raw, ay.owning_sum_raw, tci, tco,
    )
    if next_grid is not None:
        writes = next_grid.augmented_bytes
    else:
        writes = layer.out_shape.elements * layer.element_bytes
    reads = int(reads)
    return TileCost(
        oi=2 * layer_macs(layer) / (reads + writes),
        read_bytes=reads,
        write_bytes=int(writes),
        footprint_bytes=int(footprint),
        batches=int(batches),
        est_cycles=float(est),
        dispatch_units=int(units),
        epochs=int(epochs),
        halo_bytes=int(halo),
    )


# ---------------------------------------------------------------------------
# Partitioning among NSTs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NstJob:
    """One output element (tile-local xo, yo, co) over an input-channel range."""
    nst: int
    batch: int
    xo: int
    yo: int
    co: int
    ci_lo: int
    ci_hi: int
    reduction: bool = False

    @property
    def length(self) -> int:
        return self.ci_hi - self.ci_lo


def partition_tile(tile: Tile4D, n_nst: int) -> List[NstJob]:
    """
    Split a tile's output elements among NSTs.

    Jobs are enumerated xo fastest, then yo, then co; job i runs on NST
    i mod n_nst in batch i // n_nst. When the tile has fewer output
    elements than NSTs, T_Ci is split across NSTs and the jobs are flagged
    for PE-side reduction.

    Args:
        tile: Tile to partition
        n_nst: NSTs per cluster

    Returns:
        list: NstJob records in issue order
    """
    if n_nst < 1:
        raise TilingError(f"n_nst must be >= 1, got {n_nst}")
    units = tile.output_units
    if units == 0:
        return []

    splits = 1
    if units < n_nst:
        splits = max(1, min(n_nst // units, tile.t_ci))
    bounds = [tile.t_ci * s // splits for s in range(splits + 1)]

    jobs = []
    i = 0
    for co in range(tile.t_co):
        for yo in range(tile.t_yo):
            for xo in range(tile.t_xo):
                for s in range(splits):
                    jobs.append(NstJob(nst=i % n_nst, batch=i // n_nst, xo=xo, yo=yo, co=co,
                                       ci_lo=bounds[s], ci_hi=bounds[s + 1], reduction=splits > 1))
                    i += 1
    return jobs


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

def candidate_sizes(extent: int) -> List[int]:
    """Powers of two, divisors and the full extent, ascending."""
    sizes = {extent}
    p = 1
    while p <= extent:
        sizes.add(p)
        p *= 2
    d = 1
    while d * d <= extent:
        if extent % d == 0:
            sizes.add(d)
            sizes.add(extent // d)
        d += 1
    return sorted(sizes)


def bucket_key(layer: LayerSpec, dims: Dims, banking_factor: float) -> str:
    """Efficiency bucket: kernel class, stream length rounded down to a power of two, BF."""
    if layer.kind == LayerKind.FC:
        kernel_class = 'fc'
    else:
        kernel_class = f"{layer.kernel[0]}x{layer.kernel[1]}s{layer.stride[0]}"
    stream = layer.kernel[0] * layer.kernel[1] * min(dims[2], layer.in_shape.c)
    return f"{kernel_class}|L{1 << (stream.bit_length() - 1)}|BF{banking_factor:g}"


@dataclass
class LayerSchedule:
    """Chosen tiling of one CONV/FC layer."""
    layer_id: str
    kind: str
    dims: Dims
    counts: Tuple[int, int, int, int]
    cost: TileCost
    bucket: str
    in_shape: Shape3D
    out_shape: Shape3D

    def to_dict(self) -> Dict:
        return {
            'layer_id': self.layer_id,
            'kind': self.kind,
            'dims': list(self.dims),
            'counts': list(self.counts),
            'cost': self.cost.to_dict(),
            'bucket': self.bucket,
            'in_shape': self.in_shape.to_dict(),
            'out_shape': self.out_shape.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'LayerSchedule':
        return cls(
            layer_id=data['layer_id'], kind=data['kind'], dims=tuple(data['dims']),
            counts=tuple(data['counts']), cost=TileCost.from_dict(data['cost']),
            bucket=data['bucket'], in_shape=Shape3D(**data['in_shape']),
            out_shape=Shape3D(**data['out_shape']),
        )


@dataclass
class Schedule:
    """Per-layer tilings of a network, plus the layers fused into their producers."""
    network: str
    profile: str
    spm_bytes: int
    layers: Dict[str, LayerSchedule] = field(default_factory=dict)
    fused: Dict[str, str] = field(default_factory=dict)

    @property
    def buckets(self) -> List[str]:
        return sorted({entry.bucket for entry in self.layers.values()})

    @property
    def est_cycles(self) -> float:
        return sum(entry.cost.est_cycles for entry in self.layers.values())

    def to_dict(self) -> Dict:
        return {
            'network': self.network,
            'profile': self.profile,
            'spm_bytes': self.spm_bytes,
            'layers': [entry.to_dict() for entry in self.layers.values()],
            'fused': dict(self.fused),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'Schedule':
        try:
            schedule = cls(network=data['network'], profile=data['profile'], spm_bytes=data['spm_bytes'],
                           fused=dict(data.get('fused', {})))
            for entry in data['layers']:
                layer = LayerSchedule.from_dict(entry)
                schedule.layers[layer.layer_id] = layer
        except (KeyError, TypeError) as e:
            raise UserInputError(f"Malformed schedule document: {e}")
        return schedule

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write('\n')

    @classmethod
    def load(cls, path: str) -> 'Schedule':
        try:
            with open(path, 'r', encoding='utf-8') as handle:
                return cls.from_dict(json.load(handle))
        except FileNotFoundError:
            raise UserInputError(f"Schedule file not found: {path}")
        except json.JSONDecodeError as e:
            raise UserInputError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")


def fusion_map(net: NetworkDescriptor) -> Dict[str, str]:
    """
    ACT and POOL layers executed in SPM on their producer's output tiles.

    A layer is fused when its producer, skipping ACT layers, is a CONV, FC
    or ELTWISE_ADD layer. Maps the fused layer id to that producer id.
    """
    layers = net.layer_map()
    fused = {}
    for layer in net.layers:
        if layer.kind not in (LayerKind.ACT, LayerKind.POOL):
            continue
        anchor = layers.get(layer.inputs[0])
        while anchor is not None and anchor.kind == LayerKind.ACT:
            anchor = layers.get(anchor.inputs[0])
        if anchor is not None and anchor.kind in (LayerKind.CONV, LayerKind.FC, LayerKind.ELTWISE_ADD):
            fused[layer.id] = anchor.id
    return fused


def _search_layer(layer: LayerSpec, profile: HardwareProfile, spm_bytes: int):
    """Best dims of one layer, or (None, smallest footprint) when nothing fits."""
    kx, ky = layer.kernel
    sx, sy = layer.stride
    px, py = layer.padding
    xi, yi, ci, co = layer.in_shape.x, layer.in_shape.y, layer.in_shape.c, layer.out_shape.c

    if layer.kind == LayerKind.FC:
        cand_x, cand_y = [xi], [yi]
    else:
        cand_x, cand_y = candidate_sizes(xi), candidate_sizes(yi)
    cand_ci, cand_co = candidate_sizes(ci), candidate_sizes(co)

    def axis_arrays(cands, n_in, n_out, k, s, p):
        summaries = [axis_summary(n_in, n_out, k, s, p, t) for t in cands]
        return (np.array([a.max_aug for a in summaries], dtype=np.float64),
                np.array([a.max_out for a in summaries], dtype=np.float64),
                np.array([a.owning_count for a in summaries], dtype=np.float64),
                np.array([a.owning_sum_aug for a in summaries], dtype=np.float64),
                np.array([a.owning_sum_raw for a in summaries], dtype=np.float64))

    mx_aug, mx_out, mx_n, mx_sum, mx_raw = axis_arrays(cand_x, xi, layer.out_shape.x, kx, sx, px)
    my_aug, my_out, my_n, my_sum, my_raw = axis_arrays(cand_y, yi, layer.out_shape.y, ky, sy, py)

    shape_x = (-1, 1, 1, 1)
    shape_y = (1, -1, 1, 1)
    tci = np.array(cand_ci, dtype=np.float64).reshape(1, 1, -1, 1)
    tco = np.array(cand_co, dtype=np.float64).reshape(1, 1, 1, -1)

    est, footprint, reads, _, _, _, _ = _prior(
        layer, profile,
        mx_aug.reshape(shape_x), my_aug.reshape(shape_y),
        mx_out.reshape(shape_x), my_out.reshape(shape_y),
        mx_n.reshape(shape_x), my_n.reshape(shape_y),
        mx_sum.reshape(shape_x), my_sum.reshape(shape_y),
        mx_raw.reshape(shape_x), my_raw.reshape(shape_y),
        tci, tco,
    )
    full = np.broadcast_shapes(est.shape, footprint.shape, reads.shape)
    est = np.broadcast_to(est, full).ravel()
    footprint = np.broadcast_to(footprint, full).ravel()
    reads = np.broadcast_to(reads, full).ravel()

    grid = np.meshgrid(np.array(cand_x), np.array(cand_y), np.array(cand_ci), np.array(cand_co), indexing='ij')
    X, Y, C, O = (g.ravel() for g in grid)

    feasible = footprint <= spm_bytes
    if not feasible.any():
        return None, int(footprint.min())

    idx = np.flatnonzero(feasible)
    order = np.lexsort((O[idx], C[idx], Y[idx], X[idx], reads[idx], -(X[idx] * Y[idx]), est[idx]))
    best = idx[order[0]]
    return (int(X[best]), int(Y[best]), int(C[best]), int(O[best])), None


def search_tiles(net: NetworkDescriptor, profile: HardwareProfile, spm_bytes: Optional[int] = None,
                 jobs: int = 1) -> Schedule:
    """
    Choose tile dimensions for every CONV/FC layer.

    The search is exhaustive over powers of two, divisors and full extents
    per dimension, keeps tilings whose ping-pong footprint fits the SPM and
    minimizes estimated cycles. Ties prefer larger T_Xi*T_Yi, then fewer
    read bytes, then lexicographically smaller dims. Layers with identical
    signatures share one search.

    Args:
        net: Network with inferred shapes
        profile: Hardware profile (SPM size, bandwidths, PE costs)
        spm_bytes: SPM size override in bytes
        jobs: Worker processes for distinct layer signatures

    Returns:
        Schedule: Tiling of every CONV/FC layer

    Raises:
        TilingInfeasibleError: Listing every layer with no feasible tiling
    """
    spm = spm_bytes if spm_bytes is not None else profile.cluster.spm_bytes
    weighted = net.weighted_layers()

    distinct: Dict[Tuple, LayerSpec] = {}
    for layer in weighted:
        distinct.setdefault(layer.signature, layer)
    signatures = list(distinct)
    representatives = [distinct[s] for s in signatures]

    if jobs > 1 and len(representatives) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_search_layer, representatives, repeat(profile), repeat(spm)))
    else:
        results = [_search_layer(layer, profile, spm) for layer in representatives]
    chosen = dict(zip(signatures, results))

    failures = {}
    schedule = Schedule(network=net.name, profile=profile.name, spm_bytes=spm, fused=fusion_map(net))
    bf = profile.cluster.banking_factor
    for layer in weighted:
        dims, min_footprint = chosen[layer.signature]
        if dims is None:
            failures[layer.id] = min_footprint
            continue
        grid_counts = _counts(layer, dims)
        schedule.layers[layer.id] = LayerSchedule(
            layer_id=layer.id,
            kind=layer.kind.value,
            dims=dims,
            counts=grid_counts,
            cost=tile_cost(layer, dims, profile),
            bucket=bucket_key(layer, dims, bf),
            in_shape=layer.in_shape,
            out_shape=layer.out_shape,
        )

    if failures:
        raise TilingInfeasibleError(failures, spm)

    log_info(f"Tiled {len(schedule.layers)} layers of '{net.name}' "
             f"({len(signatures)} distinct signatures, {len(schedule.buckets)} buckets)", 'search_tiles')
    return schedule


def _counts(layer: LayerSpec, dims: Dims) -> Tuple[int, int, int, int]:
    ax, ay = _axes(layer, dims)
    return (ax.count, ay.count, -(-layer.in_shape.c // dims[2]), -(-layer.out_shape.c // dims[3]))


# ---------------------------------------------------------------------------
# Network-level traffic
# ---------------------------------------------------------------------------

@dataclass
class LayerTraffic:
    """DRAM bytes moved by one executed (non-fused) layer."""
    layer_id: str
    read_bytes: int
    write_bytes: int
    input_read_bytes: int = 0
    raw_input_read_bytes: int = 0
    coefficient_read_bytes: int = 0
    augmented_input_bytes: int = 0


@dataclass
class LayerGeometry:
    """Axis summaries and slice counts of a scheduled layer."""
    x: AxisSummary
    y: AxisSummary
    tci: int
    tco: int
    nci: int
    nco: int

    @property
    def units(self) -> int:
        return self.spatial_tiles * self.nco

    @property
    def spatial_tiles(self) -> int:
        """Spatial tiles that own outputs."""
        return self.x.owning_count * self.y.owning_count


def layer_geometry(layer: LayerSpec, dims: Dims) -> LayerGeometry:
    ax, ay = _axes(layer, dims)
    tci = min(dims[2], layer.in_shape.c)
    tco = min(dims[3], layer.out_shape.c)
    return LayerGeometry(ax, ay, tci, tco, -(-layer.in_shape.c // tci), -(-layer.out_shape.c // tco))


def _chain_end(layer: LayerSpec, consumers: Dict[str, List[LayerSpec]], fused: Dict[str, str]) -> LayerSpec:
    end = layer
    while True:
        following = [c for c in consumers.get(end.id, []) if c.id in fused]
        if len(following) != 1:
            return end
        end = following[0]


def network_traffic(net: NetworkDescriptor, schedule: Schedule) -> Dict[str, LayerTraffic]:
    """
    DRAM traffic of every executed layer.

    A layer writes the output of its fused chain either as the augmented
    blocks of a tiled CONV consumer (raw pixels plus halo and padding
    fragments) or as raw output. CONV/FC layers read augmented input blocks
    once per output-channel slice and coefficients once per spatial tile;
    streamed POOL/ELTWISE_ADD layers read their inputs once.
    """
    layers = net.layer_map()
    consumers = net.consumers()
    fused = schedule.fused
    traffic = {}

    for layer in net.layers:
        if layer.id in fused or layer.kind in (LayerKind.CONCAT, LayerKind.CLASS):
            continue
        end = _chain_end(layer, consumers, fused)
        writes = end.out_shape.elements * end.element_bytes
        for consumer in consumers.get(end.id, []):
            if consumer.kind == LayerKind.CONV and consumer.id in schedule.layers:
                geo = layer_geometry(consumer, schedule.layers[consumer.id].dims)
                writes = max(writes, geo.x.sum_aug * geo.y.sum_aug * consumer.in_shape.c * consumer.element_bytes)

        if layer.id in schedule.layers:
            geo = layer_geometry(layer, schedule.layers[layer.id].dims)
            eb = layer.element_bytes
            ci = layer.in_shape.c
            augmented = geo.x.sum_aug * geo.y.sum_aug * ci * eb
            input_reads = geo.nco * geo.x.owning_sum_aug * geo.y.owning_sum_aug * ci * eb
            coefficient_reads = geo.spatial_tiles * layer.coefficient_count * eb
            traffic[layer.id] = LayerTraffic(
                layer_id=layer.id,
                read_bytes=input_reads + coefficient_reads,
                write_bytes=writes,
                input_read_bytes=input_reads,
                raw_input_read_bytes=geo.nco * geo.x.owning_sum_raw * geo.y.owning_sum_raw * ci * eb,
                coefficient_read_bytes=coefficient_reads,
                augmented_input_bytes=augmented,
            )
        else:
            reads = sum(layers[src].out_shape.elements if src in layers else net.input_shape.elements
                        for src in layer.inputs) * layer.element_bytes
            traffic[layer.id] = LayerTraffic(layer.id, reads, writes, input_read_bytes=reads)
    return traffic


@dataclass
class ScheduleOverheads:
    """Tiling overheads of a scheduled network."""
    network: str
    storage_overhead: float
    halo_read_overhead: float
    read_bytes: int
    write_bytes: int

    @property
    def write_read_ratio(self) -> float:
        return self.write_bytes / self.read_bytes if self.read_bytes else 0.0

    def to_dict(self) -> Dict:
        return {
            'network': self.network,
            'storage_overhead': self.storage_overhead,
            'halo_read_overhead': self.halo_read_overhead,
            'read_bytes': self.read_bytes,
            'write_bytes': self.write_bytes,
            'write_read_ratio': self.write_read_ratio,
        }


def schedule_overheads(net: NetworkDescriptor, schedule: Schedule) -> ScheduleOverheads:
    """
    Storage and bandwidth overheads caused by augmented tiles.

    Storage overhead compares coefficients plus the largest of (largest
    activation, largest augmented input) against the untiled total. Halo
    read overhead is the extra input bytes fetched because of halos and
    padding divided by all bytes read by CONV/FC layers.
    """
    traffic = network_traffic(net, schedule)
    storage = storage_report(net)
    weighted = [t for lid, t in traffic.items() if lid in schedule.layers]

    largest_aug = max((t.augmented_input_bytes for t in weighted), default=0)
    tiled_total = storage.coefficient_bytes + max(storage.largest_layer_bytes, largest_aug)
    weighted_reads = sum(t.read_bytes for t in weighted)
    halo = sum(t.input_read_bytes - t.raw_input_read_bytes for t in weighted)

    return ScheduleOverheads(
        network=net.name,
        storage_overhead=tiled_total / storage.total_bytes - 1.0,
        halo_read_overhead=halo / weighted_reads if weighted_reads else 0.0,
        read_bytes=sum(t.read_bytes for t in traffic.values()),
        write_bytes=sum(t.write_bytes for t in traffic.values()),
    )


def check_schedule(net: NetworkDescriptor, schedule: Schedule, spm_bytes: int) -> List[str]:
    """
    Check a (possibly loaded) schedule against a network and a scratchpad size.

    Returns:
        One message per violation, empty when the schedule fits
    """
    problems = []
    for layer in net.weighted_layers():
        entry = schedule.layers.get(layer.id)
        if entry is None:
            problems.append(f"layer '{layer.id}' is not scheduled")
            continue
        if entry.in_shape != layer.in_shape or entry.out_shape != layer.out_shape:
            problems.append(f"layer '{layer.id}' was scheduled for {entry.in_shape} -> {entry.out_shape}, "
                            f"network has {layer.in_shape} -> {layer.out_shape}")
            continue
        if entry.cost.footprint_bytes > spm_bytes:
            problems.append(f"layer '{layer.id}' needs {entry.cost.footprint_bytes} B of scratchpad, "
                            f"the cluster has {spm_bytes} B")
        if layer.kind == LayerKind.FC and entry.dims[:2] != (layer.in_shape.x, layer.in_shape.y):
            problems.append(f"layer '{layer.id}' is FC but its tile does not span the input")
    return problems


def layer_ratio_sweep(layer: LayerSpec, profile: HardwareProfile, t_x: int, t_y: int) -> List[Dict]:
    """OI and estimated cycles over every (T_Ci, T_Co) pair at fixed spatial dims."""
    rows = []
    for t_ci in candidate_sizes(layer.in_shape.c):
        for t_co in candidate_sizes(layer.out_shape.c):
            cost = tile_cost(layer, (t_x, t_y, t_ci, t_co), profile)
            rows.append({
                'layer': layer.id, 't_ci': t_ci, 't_co': t_co, 'r_tcl': t_co / t_ci,
                'oi': cost.oi, 'est_cycles': cost.est_cycles,
                'feasible': cost.footprint_bytes <= profile.cluster.spm_bytes,
            })
    return rows

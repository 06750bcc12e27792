"""
Domain models for the SMC ConvNet simulator.

This module defines the immutable value types shared by the analysis,
tiling and simulation modules: layer specifications, shapes, network
descriptors and the storage/MAC reports derived from them.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple


class LayerKind(str, Enum):
    """Layer classes a network descriptor may contain."""
    CONV = 'CONV'
    ACT = 'ACT'
    POOL = 'POOL'
    FC = 'FC'
    CLASS = 'CLASS'
    CONCAT = 'CONCAT'
    ELTWISE_ADD = 'ELTWISE_ADD'


WEIGHTED_KINDS = (LayerKind.CONV, LayerKind.FC)
MULTI_INPUT_KINDS = (LayerKind.CONCAT, LayerKind.ELTWISE_ADD)


@dataclass(frozen=True)
class Shape3D:
    """A (X, Y, C) activation volume."""
    x: int
    y: int
    c: int

    @property
    def elements(self) -> int:
        return self.x * self.y * self.c

    def to_dict(self) -> Dict[str, int]:
        return {'x': self.x, 'y': self.y, 'c': self.c}

    def __str__(self):
        return f"{self.x}x{self.y}x{self.c}"


@dataclass(frozen=True)
class LayerSpec:
    """
    One layer of a network descriptor.

    Shapes are filled in by model.infer_shapes; a freshly parsed layer has
    in_shapes empty and out_shape None. FC layers carry the kernel of the
    convolution they are normalized to once shapes are inferred.
    """
    id: str
    kind: LayerKind
    inputs: Tuple[str, ...]
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    out_channels: Optional[int] = None
    bias: bool = True
    pool_kind: Optional[str] = None
    act_kind: Optional[str] = None
    global_pool: bool = False
    element_bytes: int = 4
    in_shapes: Tuple[Shape3D, ...] = ()
    out_shape: Optional[Shape3D] = None

    @property
    def in_shape(self) -> Optional[Shape3D]:
        return self.in_shapes[0] if self.in_shapes else None

    @property
    def is_weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    @property
    def coefficient_count(self) -> int:
        """Number of weights plus biases (zero for unweighted layers)."""
        if not self.is_weighted or self.in_shape is None:
            return 0
        kx, ky = self.kernel
        co = self.out_channels
        return kx * ky * self.in_shape.c * co + (co if self.bias else 0)

    @property
    def signature(self) -> Tuple:
        """Hashable key identifying layers that tile identically."""
        return (self.kind.value, self.kernel, self.stride, self.padding,
                self.in_shape, self.out_shape.c if self.out_shape else None, self.bias)

    def with_shapes(self, in_shapes: List[Shape3D], out_shape: Shape3D, **changes) -> 'LayerSpec':
        return replace(self, in_shapes=tuple(in_shapes), out_shape=out_shape, **changes)

    def to_dict(self) -> Dict:
        data = {
            'id': self.id,
            'kind': self.kind.value,
            'inputs': list(self.inputs),
        }
        if self.kind in (LayerKind.CONV, LayerKind.POOL, LayerKind.FC):
            data['kernel'] = list(self.kernel)
            data['stride'] = list(self.stride)
            data['padding'] = list(self.padding)
        if self.is_weighted:
            data['out_channels'] = self.out_channels
            data['bias'] = self.bias
        if self.pool_kind:
            data['pool_kind'] = self.pool_kind
        if self.act_kind:
            data['act_kind'] = self.act_kind
        if self.global_pool:
            data['global'] = True
        if self.out_shape is not None:
            data['in_shape'] = self.in_shape.to_dict()
            data['out_shape'] = self.out_shape.to_dict()
        return data

    def __repr__(self):
        return f"<LayerSpec(id='{self.id}', kind={self.kind.value}, out={self.out_shape})>"


@dataclass(frozen=True)
class NetworkDescriptor:
    """A topologically ordered DAG of layers fed by a single input volume."""
    name: str
    input_shape: Shape3D
    layers: Tuple[LayerSpec, ...]
    description: str = ''

    @property
    def is_annotated(self) -> bool:
        return all(layer.out_shape is not None for layer in self.layers)

    @property
    def sink(self) -> LayerSpec:
        return self.layers[-1]

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def layer_map(self) -> Dict[str, LayerSpec]:
        return {layer.id: layer for layer in self.layers}

    def consumers(self) -> Dict[str, List[LayerSpec]]:
        """Map each layer id (and 'input') to the layers that read it."""
        result: Dict[str, List[LayerSpec]] = {'input': []}
        for layer in self.layers:
            result.setdefault(layer.id, [])
        for layer in self.layers:
            for source in layer.inputs:
                result.setdefault(source, []).append(layer)
        return result

    def weighted_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.is_weighted]

    def to_dict(self) -> Dict:
        return {
            'name': self.name,
            'description': self.description,
            'input': self.input_shape.to_dict(),
            'layers': [layer.to_dict() for layer in self.layers],
        }

    def __repr__(self):
        return f"<NetworkDescriptor(name='{self.name}', layers={len(self.layers)}, input={self.input_shape})>"


@dataclass
class StorageReport:
    """
    Storage requirement of a network under layer-by-layer execution.

    Activation bytes are listed for every layer. ACT layers run in place on
    their producer's buffer; they are named in `in_place_layers` and do not
    add to the largest-layer or training totals.
    """
    network: str
    activation_bytes: Dict[str, int]
    coefficient_bytes: int
    largest_layer: str
    largest_layer_bytes: int
    element_bytes: int = 4
    in_place_layers: List[str] = field(default_factory=list)

    @property
    def materialized_bytes(self) -> Dict[str, int]:
        held = {lid: size for lid, size in self.activation_bytes.items() if lid not in self.in_place_layers}
        return held or {self.largest_layer: self.largest_layer_bytes}

    @property
    def total_bytes(self) -> int:
        return self.coefficient_bytes + self.largest_layer_bytes

    @property
    def training_total_bytes(self) -> int:
        """Coefficients plus every activation (all kept for the backward pass)."""
        return self.coefficient_bytes + sum(self.materialized_bytes.values())

    @property
    def parameter_count(self) -> int:
        return self.coefficient_bytes // self.element_bytes

    def to_dict(self) -> Dict:
        mib = float(1 << 20)
        return {
            'network': self.network,
            'coefficient_bytes': self.coefficient_bytes,
            'coefficient_mib': self.coefficient_bytes / mib,
            'largest_layer': self.largest_layer,
            'largest_layer_bytes': self.largest_layer_bytes,
            'total_bytes': self.total_bytes,
            'total_mib': self.total_bytes / mib,
            'training_total_bytes': self.training_total_bytes,
            'training_total_mib': self.training_total_bytes / mib,
            'parameter_count': self.parameter_count,
            'activation_bytes': dict(self.activation_bytes),
            'in_place_layers': list(self.in_place_layers),
        }


@dataclass
class MacReport:
    """Per-layer MAC counts plus separately counted non-MAC operations."""
    network: str
    per_layer: Dict[str, int] = field(default_factory=dict)
    non_mac_ops: Dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())

    @property
    def non_mac_total(self) -> int:
        return sum(self.non_mac_ops.values())

    @property
    def gmac(self) -> float:
        return self.total / 1e9

    def to_dict(self) -> Dict:
        return {
            'network': self.network,
            'total_macs': self.total,
            'gmac': self.gmac,
            'non_mac_ops': self.non_mac_total,
            'per_layer': dict(self.per_layer),
            'non_mac_per_layer': dict(self.non_mac_ops),
        }

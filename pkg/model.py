"""
Network descriptor parsing and analysis.

This module parses JSON network descriptors into validated
NetworkDescriptor DAGs, infers per-layer shapes with standard convolution
arithmetic, and derives MAC counts and layer-by-layer storage requirements.
"""

import json
import logging
from dataclasses import replace
from typing import Any, Dict, List, Optional, Tuple

from error_handling import UserInputError
from models import (
    LayerKind,
    LayerSpec,
    MacReport,
    MULTI_INPUT_KINDS,
    NetworkDescriptor,
    Shape3D,
    StorageReport,
)

logger = logging.getLogger(__name__)

INPUT_ID = 'input'

_TOP_LEVEL_KEYS = {'name', 'description', 'input', 'layers'}
_LAYER_KEYS = {
    'id', 'kind', 'inputs', 'kernel', 'stride', 'padding', 'out_channels',
    'bias', 'pool_kind', 'act_kind', 'global', 'element_bytes',
}


class DescriptorError(UserInputError):
    """Raised for malformed or inconsistent network descriptors."""
    pass


class ShapeError(DescriptorError):
    """Raised when shape inference produces an invalid volume."""
    pass


def _pair(value: Any, default: int, key: str, layer_id: str) -> Tuple[int, int]:
    if value is None:
        return (default, default)
    if isinstance(value, bool):
        raise DescriptorError(f"Layer '{layer_id}': '{key}' must be an integer or [x, y]")
    if isinstance(value, int):
        return (value, value)
    if isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        return (value[0], value[1])
    raise DescriptorError(f"Layer '{layer_id}': '{key}' must be an integer or [x, y]")


def _positive_int(value: Any, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise DescriptorError(f"{what} must be a positive integer, got {value!r}")
    return value


def _parse_layer(raw: Dict[str, Any], index: int, previous: str) -> LayerSpec:
    if not isinstance(raw, dict):
        raise DescriptorError(f"Layer #{index} must be an object")
    layer_id = raw.get('id')
    if not isinstance(layer_id, str) or not layer_id:
        raise DescriptorError(f"Layer #{index} has no 'id'")
    if layer_id == INPUT_ID:
        raise DescriptorError(f"Layer id '{INPUT_ID}' is reserved for the network input")

    unknown = sorted(set(raw) - _LAYER_KEYS)
    if unknown:
        raise DescriptorError(f"Layer '{layer_id}': unknown keys {', '.join(unknown)}")

    try:
        kind = LayerKind(raw.get('kind'))
    except ValueError:
        raise DescriptorError(f"Layer '{layer_id}': unknown layer kind {raw.get('kind')!r}")

    inputs = raw.get('inputs', [previous])
    if not isinstance(inputs, list) or not all(isinstance(i, str) for i in inputs):
        raise DescriptorError(f"Layer '{layer_id}': 'inputs' must be a list of layer ids")
    if kind in MULTI_INPUT_KINDS:
        if len(inputs) < 2:
            raise DescriptorError(f"Layer '{layer_id}': {kind.value} needs at least 2 inputs")
    elif len(inputs) != 1:
        raise DescriptorError(f"Layer '{layer_id}': {kind.value} takes exactly 1 input")

    kernel = _pair(raw.get('kernel'), 1, 'kernel', layer_id)
    stride = _pair(raw.get('stride'), 1, 'stride', layer_id)
    padding = _pair(raw.get('padding'), 0, 'padding', layer_id)
    if min(kernel) < 1 or min(stride) < 1:
        raise DescriptorError(f"Layer '{layer_id}': kernel and stride must be >= 1")
    if min(padding) < 0:
        raise DescriptorError(f"Layer '{layer_id}': padding must be >= 0")

    out_channels = raw.get('out_channels')
    if kind in (LayerKind.CONV, LayerKind.FC):
        out_channels = _positive_int(out_channels, f"Layer '{layer_id}': out_channels")
    elif out_channels is not None:
        raise DescriptorError(f"Layer '{layer_id}': out_channels is only valid for CONV/FC")

    pool_kind = raw.get('pool_kind')
    if kind == LayerKind.POOL:
        pool_kind = pool_kind or 'MAX'
        if pool_kind != 'MAX':
            raise DescriptorError(f"Layer '{layer_id}': unsupported pool_kind {pool_kind!r}")
    elif pool_kind is not None:
        raise DescriptorError(f"Layer '{layer_id}': pool_kind is only valid for POOL")

    act_kind = raw.get('act_kind')
    if kind == LayerKind.ACT:
        act_kind = act_kind or 'RELU'
        if act_kind != 'RELU':
            raise DescriptorError(f"Layer '{layer_id}': unsupported act_kind {act_kind!r}")
    elif act_kind is not None:
        raise DescriptorError(f"Layer '{layer_id}': act_kind is only valid for ACT")

    global_pool = raw.get('global', False)
    if global_pool and kind != LayerKind.POOL:
        raise DescriptorError(f"Layer '{layer_id}': 'global' is only valid for POOL")

    bias = raw.get('bias', True)
    if not isinstance(bias, bool):
        raise DescriptorError(f"Layer '{layer_id}': 'bias' must be true or false")

    element_bytes = raw.get('element_bytes', 4)
    if element_bytes != 4:
        raise DescriptorError(f"Layer '{layer_id}': only FP32 (element_bytes = 4) is supported")

    return LayerSpec(
        id=layer_id,
        kind=kind,
        inputs=tuple(inputs),
        kernel=kernel,
        stride=stride,
        padding=padding,
        out_channels=out_channels,
        bias=bias if kind in (LayerKind.CONV, LayerKind.FC) else False,
        pool_kind=pool_kind,
        act_kind=act_kind,
        global_pool=bool(global_pool),
        element_bytes=element_bytes,
    )


def _topological_order(layers: List[LayerSpec]) -> List[LayerSpec]:
    """Order layers so producers precede consumers; stable for ordered input."""
    by_id = {layer.id: layer for layer in layers}
    position = {layer.id: i for i, layer in enumerate(layers)}
    pending = {layer.id: sum(1 for src in set(layer.inputs) if src != INPUT_ID) for layer in layers}
    consumers: Dict[str, List[str]] = {layer.id: [] for layer in layers}
    for layer in layers:
        for src in set(layer.inputs):
            if src != INPUT_ID:
                consumers[src].append(layer.id)

    ready = sorted((lid for lid, n in pending.items() if n == 0), key=position.get)
    ordered = []
    while ready:
        current = ready.pop(0)
        ordered.append(by_id[current])
        for nxt in consumers[current]:
            pending[nxt] -= 1
            if pending[nxt] == 0:
                ready.append(nxt)
                ready.sort(key=position.get)

    if len(ordered) != len(layers):
        stuck = sorted(lid for lid, n in pending.items() if n > 0)
        raise DescriptorError(f"Cycle detected among layers: {', '.join(stuck)}")
    return ordered


def parse_network(text: str, source: str = '<descriptor>') -> NetworkDescriptor:
    """
    Parse and validate a JSON network descriptor.

    Args:
        text: Descriptor document
        source: Name used in error messages

    Returns:
        NetworkDescriptor: Validated network with inferred shapes

    Raises:
        DescriptorError: On syntax errors (with line and column), unknown
            kinds or keys, duplicate ids, dangling inputs, cycles, a missing
            or ambiguous sink, or shape inconsistencies
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise DescriptorError(f"{source}: syntax error at line {e.lineno}, column {e.colno}: {e.msg}")

    if not isinstance(data, dict):
        raise DescriptorError(f"{source}: descriptor must be a JSON object")
    unknown = sorted(set(data) - _TOP_LEVEL_KEYS)
    if unknown:
        raise DescriptorError(f"{source}: unknown keys {', '.join(unknown)}")

    name = data.get('name')
    if not isinstance(name, str) or not name:
        raise DescriptorError(f"{source}: missing network 'name'")

    raw_input = data.get('input')
    if not isinstance(raw_input, dict) or set(raw_input) != {'x', 'y', 'c'}:
        raise DescriptorError(f"{source}: 'input' must be an object with x, y and c")
    input_shape = Shape3D(
        _positive_int(raw_input['x'], 'input.x'),
        _positive_int(raw_input['y'], 'input.y'),
        _positive_int(raw_input['c'], 'input.c'),
    )

    raw_layers = data.get('layers')
    if not isinstance(raw_layers, list) or not raw_layers:
        raise DescriptorError(f"{source}: network '{name}' has no layers")

    layers = []
    previous = INPUT_ID
    seen = set()
    for index, raw in enumerate(raw_layers):
        layer = _parse_layer(raw, index, previous)
        if layer.id in seen:
            raise DescriptorError(f"Duplicate layer id '{layer.id}'")
        seen.add(layer.id)
        layers.append(layer)
        previous = layer.id

    for layer in layers:
        for src in layer.inputs:
            if src != INPUT_ID and src not in seen:
                raise DescriptorError(f"Layer '{layer.id}' references unknown input '{src}'")
            if src == layer.id:
                raise DescriptorError(f"Cycle detected: layer '{layer.id}' reads itself")

    ordered = _topological_order(layers)

    consumed = {src for layer in ordered for src in layer.inputs}
    sinks = [layer.id for layer in ordered if layer.id not in consumed]
    if len(sinks) != 1:
        raise DescriptorError(f"Network '{name}' must have exactly one sink, found {', '.join(sinks)}")
    if INPUT_ID not in consumed:
        raise DescriptorError(f"Network '{name}' never reads its input")

    net = NetworkDescriptor(
        name=name,
        input_shape=input_shape,
        layers=tuple(ordered),
        description=data.get('description', ''),
    )
    return infer_shapes(net)


def load_network(path: str) -> NetworkDescriptor:
    """
    Read and parse a descriptor file.

    Args:
        path: Path to the JSON descriptor

    Returns:
        NetworkDescriptor: Validated network with inferred shapes
    """
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            text = handle.read()
    except FileNotFoundError:
        raise DescriptorError(f"Network descriptor not found: {path}")
    net = parse_network(text, source=path)
    logger.debug(f"Loaded network '{net.name}' ({len(net.layers)} layers) from {path}")
    return net


def _conv_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def infer_shapes(net: NetworkDescriptor) -> NetworkDescriptor:
    """
    Annotate every layer with its input and output volumes.

    FC layers are normalized to a convolution whose kernel covers the whole
    input; global pools get a kernel equal to their input extent.

    Args:
        net: Valid network (annotated or not)

    Returns:
        NetworkDescriptor: New descriptor with concrete shapes

    Raises:
        ShapeError: If a computed dimension is not positive or inputs of a
            merge layer disagree
    """
    shapes: Dict[str, Shape3D] = {INPUT_ID: net.input_shape}
    annotated = []

    for layer in net.layers:
        in_shapes = [shapes[src] for src in layer.inputs]
        first = in_shapes[0]
        changes = {}

        if layer.kind in (LayerKind.CONV, LayerKind.POOL, LayerKind.FC):
            kernel, stride, padding = layer.kernel, layer.stride, layer.padding
            if layer.kind == LayerKind.FC or (layer.kind == LayerKind.POOL and layer.global_pool):
                kernel, stride, padding = (first.x, first.y), (1, 1), (0, 0)
                changes = {'kernel': kernel, 'stride': stride, 'padding': padding}
            out_x = _conv_extent(first.x, kernel[0], stride[0], padding[0])
            out_y = _conv_extent(first.y, kernel[1], stride[1], padding[1])
            if out_x < 1 or out_y < 1:
                raise ShapeError(
                    f"Layer '{layer.id}': kernel {kernel[0]}x{kernel[1]} does not fit the padded "
                    f"input {first} (output would be {out_x}x{out_y})"
                )
            channels = first.c if layer.kind == LayerKind.POOL else layer.out_channels
            out_shape = Shape3D(out_x, out_y, channels)
        elif layer.kind == LayerKind.CONCAT:
            if any((s.x, s.y) != (first.x, first.y) for s in in_shapes):
                raise ShapeError(f"Layer '{layer.id}': CONCAT inputs differ in spatial size")
            out_shape = Shape3D(first.x, first.y, sum(s.c for s in in_shapes))
        elif layer.kind == LayerKind.ELTWISE_ADD:
            if any(s != first for s in in_shapes):
                raise ShapeError(
                    f"Layer '{layer.id}': ELTWISE_ADD shape mismatch "
                    f"({', '.join(str(s) for s in in_shapes)})"
                )
            out_shape = first
        else:
            out_shape = first

        annotated.append(layer.with_shapes(in_shapes, out_shape, **changes))
        shapes[layer.id] = out_shape

    return replace(net, layers=tuple(annotated))


def resize_input(net: NetworkDescriptor, x: int, y: Optional[int] = None) -> NetworkDescriptor:
    """
    Re-target a network to a new input resolution.

    Args:
        net: Network descriptor
        x: New input width
        y: New input height (defaults to x)

    Returns:
        NetworkDescriptor: Re-inferred network
    """
    y = x if y is None else y
    input_shape = Shape3D(_positive_int(x, 'input.x'), _positive_int(y, 'input.y'), net.input_shape.c)
    layers = []
    for layer in net.layers:
        fresh = replace(layer, in_shapes=(), out_shape=None)
        if layer.kind == LayerKind.FC:
            fresh = replace(fresh, kernel=(1, 1), stride=(1, 1), padding=(0, 0))
        layers.append(fresh)
    return infer_shapes(replace(net, input_shape=input_shape, layers=tuple(layers)))


def layer_macs(layer: LayerSpec) -> int:
    """MACs of one layer: Xo*Yo*Kx*Ky*Ci*Co for CONV/FC, zero otherwise."""
    if not layer.is_weighted:
        return 0
    out, kx, ky = layer.out_shape, layer.kernel[0], layer.kernel[1]
    return out.x * out.y * kx * ky * layer.in_shape.c * out.c


def layer_non_mac_ops(layer: LayerSpec) -> int:
    """Element operations of unweighted layers (comparisons, adds, exponentials)."""
    out = layer.out_shape
    if layer.kind == LayerKind.POOL:
        return out.elements * layer.kernel[0] * layer.kernel[1]
    if layer.kind == LayerKind.ELTWISE_ADD:
        return out.elements * (len(layer.inputs) - 1)
    if layer.kind in (LayerKind.ACT, LayerKind.CLASS):
        return out.elements
    return 0


def _require_shapes(net: NetworkDescriptor) -> NetworkDescriptor:
    return net if net.is_annotated else infer_shapes(net)


def mac_count(net: NetworkDescriptor) -> MacReport:
    """
    Count MACs per layer and in total.

    Args:
        net: Network descriptor

    Returns:
        MacReport: MACs of CONV/FC layers, non-MAC ops of the others
    """
    net = _require_shapes(net)
    report = MacReport(network=net.name)
    for layer in net.layers:
        if layer.is_weighted:
            report.per_layer[layer.id] = layer_macs(layer)
        else:
            report.non_mac_ops[layer.id] = layer_non_mac_ops(layer)
    return report


def storage_report(net: NetworkDescriptor) -> StorageReport:
    """
    Storage needed for layer-by-layer execution.

    Args:
        net: Network descriptor

    Returns:
        StorageReport: Coefficient bytes, activation bytes per layer and the
            largest intermediate layer
    """
    net = _require_shapes(net)
    activations: Dict[str, int] = {}
    in_place: List[str] = []
    coefficients = 0
    for layer in net.layers:
        coefficients += layer.coefficient_count * layer.element_bytes
        activations[layer.id] = layer.out_shape.elements * layer.element_bytes
        if layer.kind == LayerKind.ACT:
            in_place.append(layer.id)

    # a network of ACT layers only still holds its input buffer
    candidates = [lid for lid in activations if lid not in in_place] or list(activations)
    largest = max(candidates, key=lambda lid: activations[lid])
    return StorageReport(
        network=net.name,
        activation_bytes=activations,
        coefficient_bytes=coefficients,
        largest_layer=largest,
        largest_layer_bytes=activations[largest],
        in_place_layers=in_place,
    )

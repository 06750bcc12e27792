"""
Reference (untiled) forward pass.

Tensors are numpy arrays laid out (C, Y, X); convolution weights are
(Co, Ci, Ky, Kx). Everything is computed in float64 so tiled FP32 results
can be compared against it.
"""

from itertools import product
from typing import Dict, Optional, Tuple

import numpy as np

from model import layer_macs
from models import LayerKind, LayerSpec, NetworkDescriptor, Shape3D

Params = Dict[str, Tuple[np.ndarray, np.ndarray]]


def random_parameters(net: NetworkDescriptor, seed: int = 0) -> Params:
    """Weights ~ N(0, 1/fan_in) and small biases for every CONV/FC layer, as float32."""
    rng = np.random.default_rng(seed)
    params = {}
    for layer in net.weighted_layers():
        kx, ky = layer.kernel
        ci, co = layer.in_shape.c, layer.out_shape.c
        fan_in = kx * ky * ci
        weights = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(co, ci, ky, kx)).astype(np.float32)
        if layer.bias:
            bias = rng.normal(0.0, 0.1, size=co).astype(np.float32)
        else:
            bias = np.zeros(co, dtype=np.float32)
        params[layer.id] = (weights, bias)
    return params


def random_input(shape: Shape3D, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed + 7919)
    return rng.standard_normal((shape.c, shape.y, shape.x)).astype(np.float32)


def conv_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                 stride: Tuple[int, int], padding: Tuple[int, int]) -> np.ndarray:
    co, ci, ky, kx = weights.shape
    sx, sy = stride
    px, py = padding
    xp = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (py, py), (px, px)))
    yo = (xp.shape[1] - ky) // sy + 1
    xo = (xp.shape[2] - kx) // sx + 1
    w = np.asarray(weights, dtype=np.float64)
    out = np.zeros((co, yo, xo), dtype=np.float64)
    for dy in range(ky):
        for dx in range(kx):
            window = xp[:, dy:dy + sy * (yo - 1) + 1:sy, dx:dx + sx * (xo - 1) + 1:sx]
            out += np.einsum('oc,cyx->oyx', w[:, :, dy, dx], window)
    return out + np.asarray(bias, dtype=np.float64)[:, None, None]


def max_pool(x: np.ndarray, kernel: Tuple[int, int], stride: Tuple[int, int],
             padding: Tuple[int, int]) -> np.ndarray:
    kx, ky = kernel
    sx, sy = stride
    px, py = padding
    xp = np.pad(x, ((0, 0), (py, py), (px, px)), constant_values=-np.inf)
    yo = (xp.shape[1] - ky) // sy + 1
    xo = (xp.shape[2] - kx) // sx + 1
    out = np.full((x.shape[0], yo, xo), -np.inf, dtype=x.dtype)
    for dy in range(ky):
        for dx in range(kx):
            out = np.maximum(out, xp[:, dy:dy + sy * (yo - 1) + 1:sy, dx:dx + sx * (xo - 1) + 1:sx])
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax(x: np.ndarray) -> np.ndarray:
    """SoftMax over all elements of the volume."""
    shifted = np.exp(x - np.max(x))
    return shifted / shifted.sum()


def layer_forward(layer: LayerSpec, inputs, params: Params) -> np.ndarray:
    kind = layer.kind
    if kind in (LayerKind.CONV, LayerKind.FC):
        weights, bias = params[layer.id]
        return conv_forward(inputs[0], weights, bias, layer.stride, layer.padding)
    if kind == LayerKind.POOL:
        return max_pool(inputs[0], layer.kernel, layer.stride, layer.padding)
    if kind == LayerKind.ACT:
        return relu(inputs[0])
    if kind == LayerKind.CLASS:
        return softmax(inputs[0])
    if kind == LayerKind.CONCAT:
        return np.concatenate(inputs, axis=0)
    if kind == LayerKind.ELTWISE_ADD:
        return np.sum(np.stack(inputs), axis=0)
    raise ValueError(f"Unsupported layer kind {kind}")


def oracle_forward(net: NetworkDescriptor, x: np.ndarray, params: Params) -> Dict[str, np.ndarray]:
    """
    Run every layer in topological order.

    Returns:
        dict: layer id (and 'input') -> output volume (C, Y, X) in float64
    """
    outputs: Dict[str, np.ndarray] = {'input': np.asarray(x, dtype=np.float64)}
    for layer in net.layers:
        outputs[layer.id] = layer_forward(layer, [outputs[src] for src in layer.inputs], params)
    return outputs


def _window_origins(size: int, kernel: int, stride: int, pad: int) -> range:
    """Top-left input coordinates of every window that fits the zero-padded frame."""
    return range(-pad, size + pad - kernel + 1, stride)


def count_macs_loop_nest(layer: LayerSpec, limit: Optional[int] = 50_000_000,
                         skip_padding: bool = False) -> int:
    """
    Count MACs by sliding the kernel over the padded input; only for small layers.

    Every window position and kernel tap is visited, so the count checks the
    output extent as well as the per-output work. With skip_padding, taps
    that land on zero padding are left out.
    """
    if not layer.is_weighted:
        return 0
    if limit is not None and layer_macs(layer) > limit:
        raise ValueError(f"Layer '{layer.id}' is too large for a loop-nest count")
    (kx, ky), (sx, sy), (px, py) = layer.kernel, layer.stride, layer.padding
    size = layer.in_shape
    taps = 0
    for oy, ox in product(_window_origins(size.y, ky, sy, py), _window_origins(size.x, kx, sx, px)):
        for ty, tx in product(range(ky), range(kx)):
            if skip_padding and not (0 <= oy + ty < size.y and 0 <= ox + tx < size.x):
                continue
            taps += 1
    return taps * size.c * layer.out_shape.c

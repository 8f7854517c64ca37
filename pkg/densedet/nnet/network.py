"""Sequential networks: validation, forward passes, FC->conv conversion and scan geometry."""
import dataclasses
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from densedet.common.errors import ConfigurationError, ImageTooSmallError
from densedet.nnet import layers as L
from densedet.nnet.layers import LayerKind, LayerParams, LayerSpec, Shape

logger = logging.getLogger(__name__)

FACE_CLASS = 1
_MAX_WINDOW = 10000


@dataclasses.dataclass(frozen=True)
class ScanGeometry:
    """How heat-map cells relate to input pixels.

    Attributes:
        window: Side of the square input region scored by one cell.
        stride: Input pixels between neighbouring cells.
        valid: False if any layer pads, in which case the geometry is nominal.
    """

    window: int
    stride: int
    valid: bool = True


@dataclasses.dataclass(frozen=True, eq=False)
class NetworkSpec:
    """An ordered layer list with its learned parameters.

    Attributes:
        layers: The layers, applied in order.
        params: One entry per layer; LayerParams for convolution and
            fully-connected layers, None otherwise.
        input_channels: Channels expected from the image.
        mean: Per-channel value subtracted before the first layer.
        scale: Factor applied after mean subtraction.
    """

    layers: Tuple[LayerSpec, ...]
    params: Tuple[Optional[LayerParams], ...]
    input_channels: int = 1
    mean: Tuple[float, ...] = (0.0,)
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "params", tuple(self.params))
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        if len(self.params) != len(self.layers):
            raise ConfigurationError(f"{len(self.layers)} layers but {len(self.params)} parameter entries")

    @property
    def has_fc(self) -> bool:
        return any(layer.kind == LayerKind.FULLY_CONNECTED for layer in self.layers)

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params if p is not None)

    def astype(self, dtype) -> "NetworkSpec":
        """Returns a copy whose parameters are stored as dtype."""
        params = tuple(p.astype(dtype) if p is not None else None for p in self.params)
        return dataclasses.replace(self, params=params)

    def with_params(self, params: Sequence[Optional[LayerParams]]) -> "NetworkSpec":
        return dataclasses.replace(self, params=tuple(params))

    def preprocess(self, x: np.ndarray) -> np.ndarray:
        """Mean subtraction then scaling, on a (..., channels, h, w) array."""
        mean = np.asarray(self.mean, dtype=np.float64)[:, None, None]
        return (np.asarray(x, dtype=np.float64) - mean) * self.scale


def _spatial_out(layer: LayerSpec, size: int) -> Optional[int]:
    if not layer.is_windowed:
        return size
    padded = size + 2 * layer.padding
    if padded < layer.kernel:
        return None
    return (padded - layer.kernel) // layer.stride + 1


def _convolutional_layers(layers: Sequence[LayerSpec]) -> List[LayerSpec]:
    out = []
    for index, layer in enumerate(layers):
        if layer.kind == LayerKind.FULLY_CONNECTED:
            if layer.input_shape is None:
                raise ConfigurationError("fully-connected layer has no recorded input shape", index)
            channels, height, width = layer.input_shape
            if height != width:
                raise ConfigurationError(
                    f"only square fully-connected inputs convert to convolutions, got {height}x{width}", index
                )
            layer = LayerSpec(LayerKind.CONVOLUTION, kernel=height, output_channels=layer.output_channels, from_fc=True)
        out.append(layer)
    return out


def receptive_geometry(net: NetworkSpec) -> ScanGeometry:
    """Computes the window and stride of the network's heat-map cells.

    Networks that still carry fully-connected layers are measured as if
    converted by fc_to_conv.

    Arguments:
        net: The network.

    Raises:
        ConfigurationError: If no input side up to 10000 yields a 1x1 output.

    Returns:
        The scan geometry.
    """
    layers = _convolutional_layers(net.layers)
    stride = 1
    for layer in layers:
        stride *= layer.stride
    valid = all(layer.padding == 0 for layer in layers)
    for window in range(1, _MAX_WINDOW + 1):
        size = window
        for layer in layers:
            size = _spatial_out(layer, size)
            if size is None:
                break
        if size == 1:
            if window < stride:
                raise ConfigurationError(f"window {window} is smaller than stride {stride}")
            return ScanGeometry(window=window, stride=stride, valid=valid)
    raise ConfigurationError(f"no input side in [1, {_MAX_WINDOW}] yields a 1x1 output")


def infer_shapes(net: NetworkSpec, input_shape: Shape) -> List[Shape]:
    """Shape propagation; entry i is the input of layer i, the last entry the output.

    Raises:
        ConfigurationError: Naming the first inconsistent layer.
    """
    shapes = [tuple(input_shape)]
    for index, layer in enumerate(net.layers):
        shapes.append(layer.output_shape(shapes[-1], index))
    return shapes


def validate(net: NetworkSpec) -> List[Shape]:
    """Checks that layers, parameters and preprocessing agree.

    The network is propagated at its own window size.

    Raises:
        ConfigurationError: Naming the first inconsistent layer.

    Returns:
        The propagated shapes (see infer_shapes).
    """
    if len(net.mean) != net.input_channels:
        raise ConfigurationError(f"{len(net.mean)} channel means for {net.input_channels} input channels")
    if not net.layers or net.layers[-1].kind != LayerKind.SOFTMAX:
        raise ConfigurationError("the final layer must be a soft-max", len(net.layers) - 1)
    geometry = receptive_geometry(net)
    shapes = infer_shapes(net, (net.input_channels, geometry.window, geometry.window))
    for index, (layer, params) in enumerate(zip(net.layers, net.params)):
        if not layer.has_params:
            if params is not None:
                raise ConfigurationError(f"{layer.kind.value} layer carries parameters", index)
            continue
        if params is None:
            raise ConfigurationError(f"{layer.kind.value} layer has no parameters", index)
        channels = shapes[index][0]
        if layer.kind == LayerKind.CONVOLUTION:
            expected = (layer.output_channels, channels, layer.kernel, layer.kernel)
        else:
            expected = (layer.output_channels, int(np.prod(layer.input_shape)))
        if tuple(params.weights.shape) != expected:
            raise ConfigurationError(f"weights have shape {params.weights.shape}, expected {expected}", index)
        if tuple(params.bias.shape) != (layer.output_channels,):
            raise ConfigurationError(f"bias has shape {params.bias.shape}, expected ({layer.output_channels},)", index)
    if shapes[-1][0] < 2:
        raise ConfigurationError("soft-max needs at least two classes", len(net.layers) - 1)
    return shapes


def fc_to_conv(net: NetworkSpec) -> NetworkSpec:
    """Turns every fully-connected layer into an equivalent convolution.

    A layer with an (out x C*H*W) matrix becomes out filters of C x H x W at
    stride 1 without padding; later fully-connected layers become 1x1
    convolutions. Weights are reshaped, never copied or rounded.

    Arguments:
        net: The network.

    Raises:
        ConfigurationError: If a fully-connected layer lacks its input shape.

    Returns:
        A fully convolutional network (net itself if there is nothing to convert).
    """
    if not net.has_fc:
        return net
    layers = _convolutional_layers(net.layers)
    params = []
    for original, layer, p in zip(net.layers, layers, net.params):
        if original.kind == LayerKind.FULLY_CONNECTED and p is not None:
            channels, height, width = original.input_shape
            p = LayerParams(p.weights.reshape(layer.output_channels, channels, height, width), p.bias)
        params.append(p)
    logger.debug("converted %d fully-connected layers", sum(layer.from_fc for layer in layers))
    return dataclasses.replace(net, layers=tuple(layers), params=tuple(params))


def apply_layer(layer: LayerSpec, params: Optional[LayerParams], x: np.ndarray) -> np.ndarray:
    """Runs one layer on a (batch, channels, h, w) array."""
    if layer.kind == LayerKind.CONVOLUTION:
        return L.conv_batch(x, params.weights, params.bias, layer.stride, layer.padding)
    if layer.kind == LayerKind.MAX_POOL:
        return L.maxpool_batch(x, layer.kernel, layer.stride, layer.padding)
    if layer.kind == LayerKind.RELU:
        return L.relu_batch(x)
    if layer.kind == LayerKind.LRN:
        return L.lrn_batch(x, layer.lrn)
    if layer.kind == LayerKind.FULLY_CONNECTED:
        return L.fc_batch(x, params.weights, params.bias)
    return L.softmax_batch(x)


def forward_batch(net: NetworkSpec, batch: np.ndarray, keep: bool = False):
    """Forward pass over a (batch, channels, h, w) array.

    Arguments:
        net: The network.
        batch: Raw (unpreprocessed) inputs.
        keep: Whether to return every intermediate activation.

    Raises:
        ConfigurationError: If an input does not fit a layer.

    Returns:
        The output array, or (output, activations) when keep is set, where
        activations[i] is the input of layer i.
    """
    x = net.preprocess(batch)
    activations = []
    shape = tuple(x.shape[1:])
    for index, (layer, params) in enumerate(zip(net.layers, net.params)):
        shape = layer.output_shape(shape, index)
        if keep:
            activations.append(x)
        x = apply_layer(layer, params, x)
    if keep:
        return x, activations
    return x


def forward(net: NetworkSpec, tensor: np.ndarray) -> np.ndarray:
    """Runs the network on one (channels, height, width) input.

    Networks with fully-connected layers accept exactly their training
    window; fully convolutional networks accept anything at least that large
    and return the score map.

    Arguments:
        net: The network.
        tensor: The raw input.

    Raises:
        ImageTooSmallError: If the input is smaller than the window.
        ConfigurationError: If channels or shapes do not fit.

    Returns:
        The (classes, rows, cols) output.
    """
    tensor = np.asarray(tensor)
    if tensor.ndim != 3 or tensor.shape[0] != net.input_channels:
        raise ConfigurationError(f"expected a {net.input_channels}-channel tensor, got shape {tensor.shape}")
    window = receptive_geometry(net).window
    if min(tensor.shape[1:]) < window:
        raise ImageTooSmallError(f"input is {tensor.shape[1]}x{tensor.shape[2]}", window)
    return forward_batch(net, tensor[None])[0]


def describe(net: NetworkSpec) -> List[str]:
    """One human readable line per layer, with shapes at the window size."""
    geometry = receptive_geometry(net)
    shapes = infer_shapes(net, (net.input_channels, geometry.window, geometry.window))
    lines = []
    for index, layer in enumerate(net.layers):
        detail = layer.kind.value
        if layer.is_windowed:
            detail += f" k={layer.kernel} s={layer.stride} p={layer.padding}"
        if layer.output_channels is not None:
            detail += f" out={layer.output_channels}"
        lines.append(f"{index:2d} {detail:40s} {shapes[index]} -> {shapes[index + 1]}")
    return lines

"""Reference layer stacks: MiniNet and an AlexNet-shaped classifier."""
from typing import List

import numpy as np

from densedet.nnet.layers import LayerKind, LayerParams, LayerSpec, LrnParams
from densedet.nnet.network import NetworkSpec, validate

MININET_WINDOW = 35
MININET_STRIDE = 4


def mininet_layers(conv1: int = 4, conv2: int = 8, hidden: int = 16) -> List[LayerSpec]:
    """conv 5x5/2 -> relu -> pool 2x2/2 -> conv 3x3 -> relu -> fc -> relu -> fc 2 -> softmax.

    Window 35, stride 4.
    """
    return [
        LayerSpec.conv(5, conv1, stride=2),
        LayerSpec.relu(),
        LayerSpec.pool(2, 2),
        LayerSpec.conv(3, conv2),
        LayerSpec.relu(),
        LayerSpec.fc(hidden, (conv2, 6, 6)),
        LayerSpec.relu(),
        LayerSpec.fc(2, (hidden, 1, 1)),
        LayerSpec.softmax(),
    ]


def alexnet_layers() -> List[LayerSpec]:
    """The AlexNet lineage stack with a two-class head (window 227, stride 32)."""
    lrn = LrnParams(local_size=5, alpha=1e-4, beta=0.75, k=1.0)
    return [
        LayerSpec.conv(11, 96, stride=4),
        LayerSpec.relu(),
        LayerSpec.local_response_norm(lrn),
        LayerSpec.pool(3, 2),
        LayerSpec.conv(5, 256, padding=2),
        LayerSpec.relu(),
        LayerSpec.local_response_norm(lrn),
        LayerSpec.pool(3, 2),
        LayerSpec.conv(3, 384, padding=1),
        LayerSpec.relu(),
        LayerSpec.conv(3, 384, padding=1),
        LayerSpec.relu(),
        LayerSpec.conv(3, 256, padding=1),
        LayerSpec.relu(),
        LayerSpec.pool(3, 2),
        LayerSpec.fc(4096, (256, 6, 6)),
        LayerSpec.relu(),
        LayerSpec.fc(4096, (4096, 1, 1)),
        LayerSpec.relu(),
        LayerSpec.fc(2, (4096, 1, 1)),
        LayerSpec.softmax(),
    ]


def initialise(
    layers: List[LayerSpec], seed: int, input_channels: int = 1, mean=(127.5,), scale: float = 1.0 / 128.0
) -> NetworkSpec:
    """Builds a network with centred uniform weights scaled by fan-in.

    Weights are drawn from U(-a, a) with a = sqrt(6 / fan_in); biases start at zero.

    Arguments:
        layers: The layer stack.
        seed: Seed for numpy's default generator.
        input_channels: Image channels.
        mean: Per-channel preprocessing mean.
        scale: Preprocessing scale.

    Returns:
        A validated float32 network.
    """
    rng = np.random.default_rng(seed)
    params = []
    channels = input_channels
    for layer in layers:
        if layer.kind == LayerKind.CONVOLUTION:
            shape = (layer.output_channels, channels, layer.kernel, layer.kernel)
        elif layer.kind == LayerKind.FULLY_CONNECTED:
            shape = (layer.output_channels, int(np.prod(layer.input_shape)))
        else:
            params.append(None)
            continue
        fan_in = int(np.prod(shape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        weights = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        params.append(LayerParams(weights, np.zeros(layer.output_channels, dtype=np.float32)))
        channels = layer.output_channels
    net = NetworkSpec(tuple(layers), tuple(params), input_channels, tuple(mean), scale)
    validate(net)
    return net


def build_mininet(seed: int = 0, **sizes) -> NetworkSpec:
    """A freshly initialised single-channel MiniNet."""
    return initialise(mininet_layers(**sizes), seed)

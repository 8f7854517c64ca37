"""Layer descriptions and their forward/backward kernels.

Kernels work on batched float64 arrays shaped (batch, channels, height, width);
the public `*_forward` functions take a single (channels, height, width)
tensor, which is how the rest of the package talks about feature maps.
"""
import dataclasses
import enum
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from densedet.common.errors import ConfigurationError, NumericError

Shape = Tuple[int, int, int]


class LayerKind(str, enum.Enum):
    """The layer kinds a network may be built from."""

    CONVOLUTION = "convolution"
    MAX_POOL = "max-pool"
    RELU = "relu"
    FULLY_CONNECTED = "fully-connected"
    LRN = "local-response-norm"
    SOFTMAX = "softmax"


@dataclasses.dataclass(frozen=True)
class LrnParams:
    """Cross-channel local response normalisation parameters.

    Attributes:
        local_size: Number of channels in the normalisation window (n).
        alpha: Scale of the squared sum.
        beta: Exponent.
        k: Additive constant.
    """

    local_size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 1.0


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    """A single layer of a strictly sequential network.

    Attributes:
        kind: What the layer computes.
        kernel: Square kernel side in pixels (convolution, max-pool).
        stride: Step between kernel applications.
        padding: Zero padding on every border.
        output_channels: Filter count (convolution) or output width (fully-connected).
        input_shape: Expected (channels, height, width) of a fully-connected layer.
        lrn: Normalisation parameters of a local-response-norm layer.
        from_fc: Whether this convolution was produced by fc_to_conv.
    """

    kind: LayerKind
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    output_channels: Optional[int] = None
    input_shape: Optional[Shape] = None
    lrn: Optional[LrnParams] = None
    from_fc: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.input_shape is not None:
            object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.stride < 1 or self.kernel < 1 or self.padding < 0:
            raise ConfigurationError(
                f"{self.kind.value}: need stride >= 1, kernel >= 1, padding >= 0, "
                f"got stride={self.stride} kernel={self.kernel} padding={self.padding}"
            )

    @classmethod
    def conv(cls, kernel: int, output_channels: int, stride: int = 1, padding: int = 0) -> "LayerSpec":
        return cls(LayerKind.CONVOLUTION, kernel, stride, padding, output_channels)

    @classmethod
    def pool(cls, kernel: int, stride: int, padding: int = 0) -> "LayerSpec":
        return cls(LayerKind.MAX_POOL, kernel, stride, padding)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @classmethod
    def fc(cls, output_channels: int, input_shape: Optional[Shape]) -> "LayerSpec":
        return cls(LayerKind.FULLY_CONNECTED, output_channels=output_channels, input_shape=input_shape)

    @classmethod
    def local_response_norm(cls, params: Optional[LrnParams] = None) -> "LayerSpec":
        return cls(LayerKind.LRN, lrn=params if params is not None else LrnParams())

    @classmethod
    def softmax(cls) -> "LayerSpec":
        return cls(LayerKind.SOFTMAX)

    @property
    def has_params(self) -> bool:
        return self.kind in (LayerKind.CONVOLUTION, LayerKind.FULLY_CONNECTED)

    @property
    def is_windowed(self) -> bool:
        return self.kind in (LayerKind.CONVOLUTION, LayerKind.MAX_POOL)

    def output_shape(self, shape: Shape, index: Optional[int] = None) -> Shape:
        """Propagates an input shape through this layer.

        Arguments:
            shape: Input (channels, height, width).
            index: Layer index, used in error messages.

        Raises:
            ConfigurationError: If the input does not fit the layer.

        Returns:
            The output (channels, height, width).
        """
        channels, height, width = shape
        if self.kind == LayerKind.FULLY_CONNECTED:
            if self.input_shape is None:
                raise ConfigurationError("fully-connected layer has no recorded input shape", index)
            if tuple(shape) != self.input_shape:
                raise ConfigurationError(
                    f"fully-connected layer expects input {self.input_shape}, got {tuple(shape)}", index
                )
            return self.output_channels, 1, 1
        if self.is_windowed:
            padded_h = height + 2 * self.padding
            padded_w = width + 2 * self.padding
            if padded_h < self.kernel or padded_w < self.kernel:
                raise ConfigurationError(
                    f"{self.kind.value} kernel {self.kernel} exceeds padded input {padded_h}x{padded_w}", index
                )
            out_h = (padded_h - self.kernel) // self.stride + 1
            out_w = (padded_w - self.kernel) // self.stride + 1
            out_c = self.output_channels if self.kind == LayerKind.CONVOLUTION else channels
            return out_c, out_h, out_w
        if self.kind == LayerKind.LRN and self.lrn is None:
            raise ConfigurationError("local-response-norm layer has no parameters", index)
        return channels, height, width


@dataclasses.dataclass(frozen=True, eq=False)
class LayerParams:
    """Learned parameters of a convolution or fully-connected layer.

    Attributes:
        weights: (out, in, k, k) filters or an (out, in) matrix.
        bias: (out,) vector.
    """

    weights: np.ndarray
    bias: np.ndarray

    @property
    def size(self) -> int:
        return int(self.weights.size + self.bias.size)

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(self.weights.astype(dtype), self.bias.astype(dtype))


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    return np.pad(x, pad, mode="constant", constant_values=value)


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Strided (N, C, out_h, out_w, k, k) view of every kernel placement."""
    view = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _scatter_slices(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def conv_batch(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, stride: int, padding: int) -> np.ndarray:
    kernel = weights.shape[-1]
    win = _windows(_pad(np.asarray(x, dtype=np.float64), padding), kernel, stride)
    out = np.tensordot(win, np.asarray(weights, dtype=np.float64), axes=([1, 4, 5], [1, 2, 3]))
    return np.moveaxis(out, 3, 1) + np.asarray(bias, dtype=np.float64)[None, :, None, None]


def conv_backward(x: np.ndarray, weights: np.ndarray, stride: int, padding: int, grad_out: np.ndarray):
    """Gradients of a convolution w.r.t. its input, weights and bias."""
    kernel = weights.shape[-1]
    xp = _pad(np.asarray(x, dtype=np.float64), padding)
    w64 = np.asarray(weights, dtype=np.float64)
    win = _windows(xp, kernel, stride)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_xp = np.zeros_like(xp)
    out_h, out_w = grad_out.shape[2:]
    for i in range(kernel):
        rows = _scatter_slices(i, stride, out_h)
        for j in range(kernel):
            cols = _scatter_slices(j, stride, out_w)
            contrib = np.tensordot(grad_out, w64[:, :, i, j], axes=([1], [0]))
            grad_xp[:, :, rows, cols] += contrib.transpose(0, 3, 1, 2)
    height, width = x.shape[2:]
    grad_x = grad_xp[:, :, padding : padding + height, padding : padding + width]
    return grad_x, grad_w, grad_b


def maxpool_batch(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    win = _windows(_pad(np.asarray(x, dtype=np.float64), padding, -np.inf), kernel, stride)
    return win.max(axis=(4, 5))


def maxpool_winners(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Flat in-window index of the first maximum of every pooling window."""
    win = _windows(_pad(np.asarray(x, dtype=np.float64), padding, -np.inf), kernel, stride)
    return win.reshape(win.shape[:4] + (kernel * kernel,)).argmax(axis=-1)


def maxpool_backward(x: np.ndarray, kernel: int, stride: int, padding: int, grad_out: np.ndarray) -> np.ndarray:
    """Routes each output gradient to the first maximal input of its window."""
    xp = _pad(np.asarray(x, dtype=np.float64), padding, -np.inf)
    out_h, out_w = grad_out.shape[2:]
    winner = maxpool_winners(x, kernel, stride, padding)
    grad_xp = np.zeros_like(xp)
    for i in range(kernel):
        rows = _scatter_slices(i, stride, out_h)
        for j in range(kernel):
            cols = _scatter_slices(j, stride, out_w)
            grad_xp[:, :, rows, cols] += np.where(winner == i * kernel + j, grad_out, 0.0)
    height, width = x.shape[2:]
    return grad_xp[:, :, padding : padding + height, padding : padding + width]


def relu_batch(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0.0)


def _channel_window_sum(a: np.ndarray, before: int, after: int) -> np.ndarray:
    """Sums a over channels c-before .. c+after for every channel c."""
    channels = a.shape[1]
    padded = np.pad(a, ((0, 0), (before, after), (0, 0), (0, 0)))
    csum = np.concatenate([np.zeros_like(padded[:, :1]), np.cumsum(padded, axis=1)], axis=1)
    size = before + after + 1
    return csum[:, size : size + channels] - csum[:, :channels]


def _lrn_extent(params: LrnParams) -> Tuple[int, int]:
    before = (params.local_size - 1) // 2
    return before, params.local_size - 1 - before


def lrn_batch(x: np.ndarray, params: LrnParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    before, after = _lrn_extent(params)
    denom = params.k + (params.alpha / params.local_size) * _channel_window_sum(x * x, before, after)
    return x * denom ** -params.beta


def lrn_backward(x: np.ndarray, params: LrnParams, grad_out: np.ndarray) -> np.ndarray:
    before, after = _lrn_extent(params)
    denom = params.k + (params.alpha / params.local_size) * _channel_window_sum(x * x, before, after)
    direct = grad_out * denom ** -params.beta
    # channel j feeds every window c with c - before <= j <= c + after
    coupling = _channel_window_sum(grad_out * x * denom ** (-params.beta - 1.0), after, before)
    return direct - (2.0 * params.alpha * params.beta / params.local_size) * x * coupling


def fc_batch(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    flat = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
    out = flat @ np.asarray(weights, dtype=np.float64).T + np.asarray(bias, dtype=np.float64)
    return out[:, :, None, None]


def fc_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    flat = np.asarray(x, dtype=np.float64).reshape(x.shape[0], -1)
    grad2d = grad_out.reshape(grad_out.shape[0], -1)
    grad_w = grad2d.T @ flat
    grad_b = grad2d.sum(axis=0)
    grad_x = (grad2d @ np.asarray(weights, dtype=np.float64)).reshape(x.shape)
    return grad_x, grad_w, grad_b


def softmax_batch(x: np.ndarray) -> np.ndarray:
    """Soft-max over the channel axis of every spatial cell."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite logits reached soft-max")
    shifted = np.exp(x - x.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _check_tensor(tensor: np.ndarray) -> np.ndarray:
    tensor = np.asarray(tensor)
    if tensor.ndim != 3 or min(tensor.shape) < 1:
        raise ConfigurationError(f"expected a (channels, height, width) tensor, got shape {tensor.shape}")
    return tensor


def conv_forward(
    tensor: np.ndarray, spec: LayerSpec, weights: np.ndarray, bias: np.ndarray, index: Optional[int] = None
) -> np.ndarray:
    """Applies a convolution layer to a single tensor.

    Arguments:
        tensor: Input (channels, height, width).
        spec: The convolution layer.
        weights: (out, in, k, k) filters.
        bias: (out,) bias.
        index: Layer index, used in error messages.

    Raises:
        ConfigurationError: If channels or spatial size do not fit the filters.

    Returns:
        The (out, out_h, out_w) response.
    """
    tensor = _check_tensor(tensor)
    if weights.ndim != 4 or weights.shape[1] != tensor.shape[0] or weights.shape[2:] != (spec.kernel, spec.kernel):
        raise ConfigurationError(
            f"filters {weights.shape} do not match input channels {tensor.shape[0]} "
            f"and kernel {spec.kernel}",
            index,
        )
    spec.output_shape(tensor.shape, index)
    return conv_batch(tensor[None], weights, bias, spec.stride, spec.padding)[0]


def maxpool_forward(tensor: np.ndarray, spec: LayerSpec, index: Optional[int] = None) -> np.ndarray:
    """Max over every kernel window, channel by channel."""
    tensor = _check_tensor(tensor)
    spec.output_shape(tensor.shape, index)
    return maxpool_batch(tensor[None], spec.kernel, spec.stride, spec.padding)[0]


def relu_forward(tensor: np.ndarray) -> np.ndarray:
    return relu_batch(tensor)


def lrn_forward(tensor: np.ndarray, spec: LayerSpec, index: Optional[int] = None) -> np.ndarray:
    """Cross-channel normalisation b_c = a_c / (k + alpha/n * sum a^2) ** beta."""
    tensor = _check_tensor(tensor)
    if spec.lrn is None:
        raise ConfigurationError("local-response-norm layer has no parameters", index)
    return lrn_batch(tensor[None], spec.lrn)[0]


def fc_forward(
    tensor: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    input_shape: Optional[Shape] = None,
    index: Optional[int] = None,
) -> np.ndarray:
    """Applies a fully-connected layer; the result is a (out, 1, 1) tensor.

    Raises:
        ConfigurationError: If the input shape differs from the recorded one or
            does not match the weight matrix.
    """
    tensor = _check_tensor(tensor)
    if input_shape is not None and tuple(tensor.shape) != tuple(input_shape):
        raise ConfigurationError(f"fully-connected layer expects input {tuple(input_shape)}, got {tensor.shape}", index)
    if weights.ndim != 2 or weights.shape[1] != tensor.size:
        raise ConfigurationError(f"weight matrix {weights.shape} cannot consume {tensor.size} inputs", index)
    return fc_batch(tensor[None], weights, bias)[0]


def softmax(logits) -> np.ndarray:
    """Numerically stable soft-max of a logit vector.

    Raises:
        ConfigurationError: If fewer than two logits are given.
        NumericError: On non-finite logits.
    """
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if logits.size < 2:
        raise ConfigurationError("soft-max needs at least two classes")
    return softmax_batch(logits[None, :, None, None])[0, :, 0, 0]

"""Image representation."""
import dataclasses

import numpy as np

from densedet.common.errors import InvalidArgumentError

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclasses.dataclass(frozen=True, eq=False)
class Image:
    """A channel-major image with samples in [0, 255].

    Attributes:
        data: float32 array shaped (channels, height, width), channels 1 or 3.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] not in (1, 3) or min(data.shape[1:]) < 1:
            raise InvalidArgumentError(f"images are (1|3, h>=1, w>=1), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("image samples must be finite")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def to_grayscale(self) -> "Image":
        """Luma 0.299 R + 0.587 G + 0.114 B; grayscale images are returned as is."""
        if self.channels == 1:
            return self
        return Image(np.tensordot(_LUMA, self.data.astype(np.float64), axes=(0, 0))[None])

    def with_channels(self, channels: int) -> "Image":
        """Adapts the image to a model's input channel count."""
        if channels == self.channels:
            return self
        if channels == 1:
            return self.to_grayscale()
        return Image(np.repeat(self.data, channels, axis=0))

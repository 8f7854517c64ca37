"""Bilinear rescaling and image pyramids."""
import dataclasses
import logging
from typing import List, Tuple

import numpy as np

from densedet.common.errors import InvalidArgumentError
from densedet.common.utils import round_half_up
from densedet.imaging.image import Image

logger = logging.getLogger(__name__)

# Three levels per octave.
DEFAULT_FS = 0.5 ** (1.0 / 3.0)
DEFAULT_UPSCALE = 5.0
CANDIDATE_FS = (0.5 ** (1.0 / 2.0), 0.5 ** (1.0 / 3.0), 0.5 ** (1.0 / 5.0), 0.5 ** (1.0 / 7.0))


@dataclasses.dataclass(frozen=True)
class PyramidConfig:
    """How an image is rescaled for scanning.

    Attributes:
        upscale: Scale of the first level relative to the original.
        fs: Ratio between consecutive levels.
        min_dim: Smallest level side kept, normally the network window.
    """

    upscale: float = DEFAULT_UPSCALE
    fs: float = DEFAULT_FS
    min_dim: int = 227

    def __post_init__(self):
        if not 0.0 < self.fs < 1.0:
            raise InvalidArgumentError(f"fs must lie in (0, 1), got {self.fs}")
        if self.upscale < 1.0:
            raise InvalidArgumentError(f"upscale must be >= 1, got {self.upscale}")
        if self.min_dim < 1:
            raise InvalidArgumentError(f"min_dim must be >= 1, got {self.min_dim}")

    @property
    def min_detectable(self) -> float:
        """Smallest object side, in original pixels, a window can cover."""
        return self.min_dim / self.upscale


@dataclasses.dataclass(frozen=True, eq=False)
class PyramidLevel:
    """One rescaled copy of the image.

    Attributes:
        image: The rescaled image.
        scale: Level resolution over original resolution.
    """

    image: Image
    scale: float


def scaled_dims(height: int, width: int, factor: float) -> Tuple[int, int]:
    return round_half_up(height * factor), round_half_up(width * factor)


def _axis_taps(size_in: int, size_out: int, factor: float):
    src = (np.arange(size_out, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, size_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: Image, factor: float) -> Image:
    """Rescales an image by factor with bilinear interpolation.

    Sample mapping is src = (dst + 0.5) / factor - 0.5 with edge clamping, on
    both axes; output dims are round-half-up(input dims * factor).

    Arguments:
        img: The image.
        factor: Scale factor, > 0.

    Raises:
        InvalidArgumentError: If factor <= 0 or an output dim would be 0.

    Returns:
        The rescaled image.
    """
    if factor <= 0:
        raise InvalidArgumentError(f"resize factor must be positive, got {factor}")
    out_h, out_w = scaled_dims(img.height, img.width, factor)
    if out_h < 1 or out_w < 1:
        raise InvalidArgumentError(f"resizing {img.height}x{img.width} by {factor} leaves an empty image")
    data = img.data.astype(np.float64)
    lo, hi, frac = _axis_taps(img.height, out_h, factor)
    frac = frac[None, :, None]
    data = data[:, lo, :] * (1.0 - frac) + data[:, hi, :] * frac
    lo, hi, frac = _axis_taps(img.width, out_w, factor)
    frac = frac[None, None, :]
    data = data[:, :, lo] * (1.0 - frac) + data[:, :, hi] * frac
    return Image(data)


def build_pyramid(img: Image, cfg: PyramidConfig) -> List[PyramidLevel]:
    """Builds the scan pyramid of an image.

    Level k has scale upscale * fs**k and is resized from the original in a
    single step; levels are kept while their smaller side is >= min_dim.

    Arguments:
        img: The original image.
        cfg: Pyramid parameters.

    Returns:
        The levels, largest first; empty if even level 0 is too small.
    """
    levels = []
    k = 0
    while True:
        scale = cfg.upscale * cfg.fs ** k
        if min(scaled_dims(img.height, img.width, scale)) < cfg.min_dim:
            break
        levels.append(PyramidLevel(resize_bilinear(img, scale), scale))
        k += 1
    if not levels:
        logger.warning(
            "image too small: %dx%d at upscale %.3f is below %dpx", img.height, img.width, cfg.upscale, cfg.min_dim
        )
    else:
        logger.debug("pyramid levels=%d scales=%.4f..%.4f", len(levels), levels[0].scale, levels[-1].scale)
    return levels

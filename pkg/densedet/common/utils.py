"""A collection of general utilities."""
import math
from typing import NamedTuple

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class Box(NamedTuple):
    """An axis-aligned rectangle in pixel coordinates.

    Attributes:
        x: Left edge.
        y: Top edge.
        w: Width.
        h: Height.
    """

    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    @property
    def center(self):
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def scaled(self, factor: float) -> "Box":
        """Returns the box with every coordinate multiplied by factor."""
        return Box(self.x * factor, self.y * factor, self.w * factor, self.h * factor)

    def clamped(self, width: float, height: float) -> "Box":
        """Clips the box to the [0, width] x [0, height] canvas."""
        x0 = min(max(self.x, 0.0), width)
        y0 = min(max(self.y, 0.0), height)
        x1 = min(max(self.x + self.w, 0.0), width)
        y1 = min(max(self.y + self.h, 0.0), height)
        return Box(x0, y0, x1 - x0, y1 - y0)


def round_half_up(value: float) -> int:
    """Rounds to the nearest integer, halves away from zero for positives.

    eg:
        127.5 -> 128
        2.49 -> 2
    """
    return int(math.floor(value + 0.5))


def splitmix64(state: int) -> int:
    """One output of the splitmix64 generator seeded with state.

    Arguments:
        state: Any integer; only the low 64 bits are used.

    Returns:
        A 64-bit unsigned integer.
    """
    z = (state + _GOLDEN_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, index: int) -> int:
    """Derives an independent child seed for item index of a seeded job.

    Per-image and per-iteration generators are seeded with
    splitmix64(master + (index + 1) * gamma) so that work can be split across
    processes without changing any draw.

    Arguments:
        master: The master seed.
        index: The item index (image, iteration, ...).

    Returns:
        A 64-bit seed suitable for numpy.random.default_rng.
    """
    return splitmix64((master + (index + 1) * _GOLDEN_GAMMA) & _MASK64)

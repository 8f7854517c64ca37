"""A seeded corpus of cluttered images with planted face-like patterns."""
import dataclasses
import logging
import pathlib
from typing import List, Sequence, Union

import numpy as np

from densedet.common.errors import InvalidArgumentError
from densedet.common.utils import Box, derive_seed
from densedet.imaging.codec import write_image
from densedet.imaging.image import Image
from densedet.nnet.zoo import MININET_WINDOW

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

BACKGROUND_LEVEL = 110.0
NOISE_SIGMA = 12.0
_PLACEMENT_ATTEMPTS = 200


@dataclasses.dataclass(frozen=True, eq=False)
class SyntheticImage:
    image_id: str
    image: Image
    faces: List[Box]


def draw_face(canvas: np.ndarray, x: int, y: int, side: int) -> None:
    """Paints the face pattern: a bright square with two dark eyes and a mouth bar."""
    canvas[y : y + side, x : x + side] = 200.0
    eye = max(2, int(round(0.15 * side)))
    for ex in (0.3, 0.7):
        left = x + int(round(ex * side)) - eye // 2
        top = y + int(round(0.35 * side)) - eye // 2
        canvas[top : top + eye, left : left + eye] = 40.0
    mouth_w, mouth_h = int(round(0.5 * side)), max(2, int(round(0.1 * side)))
    left = x + (side - mouth_w) // 2
    top = y + int(round(0.7 * side))
    canvas[top : top + mouth_h, left : left + mouth_w] = 40.0


def face_gap(a: Box, b: Box) -> float:
    """Largest empty band between two boxes along x or y; negative when they overlap."""
    gap_x = max(b.x - (a.x + a.w), a.x - (b.x + b.w))
    gap_y = max(b.y - (a.y + a.h), a.y - (b.y + b.h))
    return max(gap_x, gap_y)


def _clutter(canvas: np.ndarray, rng: np.random.Generator, window: int) -> None:
    height, width = canvas.shape
    for _ in range(int(rng.integers(3, 7))):
        w = int(rng.integers(window // 7, window + 6))
        h = int(rng.integers(window // 7, window + 6))
        x = int(rng.integers(0, max(1, width - w)))
        y = int(rng.integers(0, max(1, height - h)))
        canvas[y : y + h, x : x + w] = rng.uniform(20.0, 235.0)


def generate_image(image_id: str, size: int, seed: int, window: int = MININET_WINDOW) -> SyntheticImage:
    """One image with one or two faces of side window+1 .. window+9.

    Two faces are at least a window apart along x or y, so no window-sized
    square overlaps both.
    """
    rng = np.random.default_rng(seed)
    canvas = np.full((size, size), BACKGROUND_LEVEL)
    _clutter(canvas, rng, window)
    faces = []
    wanted = int(rng.integers(1, 3))
    for _ in range(_PLACEMENT_ATTEMPTS):
        if len(faces) == wanted:
            break
        side = int(rng.integers(window + 1, window + 10))
        if side > size:
            break
        box = Box(int(rng.integers(0, size - side + 1)), int(rng.integers(0, size - side + 1)), side, side)
        if any(face_gap(box, other) < window for other in faces):
            continue
        draw_face(canvas, int(box.x), int(box.y), side)
        faces.append(box)
    canvas += rng.normal(0.0, NOISE_SIGMA, canvas.shape)
    return SyntheticImage(image_id, Image(np.clip(np.floor(canvas + 0.5), 0.0, 255.0)), faces)


def generate_corpus(count: int, size: int = 131, seed: int = 0, window: int = MININET_WINDOW) -> List[SyntheticImage]:
    """count images named img_0000, img_0001, ...; image i uses derive_seed(seed, i).

    Raises:
        InvalidArgumentError: If count < 0 or size is below the face size.
    """
    if count < 0:
        raise InvalidArgumentError(f"count must be >= 0, got {count}")
    if size < window + 1:
        raise InvalidArgumentError(f"size must be > {window}, got {size}")
    return [generate_image(f"img_{i:04d}", size, derive_seed(seed, i), window) for i in range(count)]


def write_corpus(corpus: Sequence[SyntheticImage], directory: PathLike, gt_name: str = "gt.txt") -> pathlib.Path:
    """Writes <image_id>.pgm files and a rectangle ground-truth file.

    Returns:
        The ground-truth path.
    """
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for item in corpus:
        write_image(item.image, directory / f"{item.image_id}.pgm")
        lines += [f"{item.image_id} {b.x:g} {b.y:g} {b.w:g} {b.h:g}\n" for b in item.faces]
    gt_path = directory / gt_name
    gt_path.write_text("".join(lines))
    logger.info("wrote corpus images=%d faces=%d dir=%s", len(corpus), len(lines), directory)
    return gt_path

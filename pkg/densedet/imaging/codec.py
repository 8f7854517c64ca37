"""Reading and writing PGM, PPM and PNG files."""
import pathlib
from typing import Union

import numpy as np
import PIL.Image

from densedet.common.errors import Error
from densedet.imaging.image import Image

PathLike = Union[str, pathlib.Path]
_SUFFIXES = (".pgm", ".ppm", ".png")


class ImageFormatError(Error):
    """The file is not a decodable image."""


def read_image(path: PathLike) -> Image:
    """Decodes a binary PGM/PPM (P5/P6) or 8-bit PNG.

    Raises:
        ImageFormatError: If the file cannot be decoded.
        FileNotFoundError: If the file is missing.

    Returns:
        A 1-channel image for grayscale files, 3 channels otherwise.
    """
    try:
        with PIL.Image.open(path) as pic:
            if pic.mode not in ("L", "RGB"):
                pic = pic.convert("L" if pic.mode in ("1", "I", "I;16", "F") else "RGB")
            array = np.asarray(pic, dtype=np.float32)
    except PIL.UnidentifiedImageError as e:
        raise ImageFormatError(f"{path}: not a PGM, PPM or PNG image") from e
    if array.ndim == 2:
        return Image(array[None])
    return Image(np.transpose(array, (2, 0, 1)))


def write_image(img: Image, path: PathLike) -> None:
    """Encodes an image; the suffix picks PGM/PPM (binary) or PNG.

    Samples are rounded half-up and clipped to [0, 255].
    """
    path = pathlib.Path(path)
    if path.suffix.lower() not in _SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported suffix, use one of {_SUFFIXES}")
    pixels = np.clip(np.floor(img.data + 0.5), 0, 255).astype(np.uint8)
    if img.channels == 1:
        pic = PIL.Image.fromarray(pixels[0])
    else:
        pic = PIL.Image.fromarray(np.ascontiguousarray(np.transpose(pixels, (1, 2, 0))))
    pic.save(path, format="PNG" if path.suffix.lower() == ".png" else "PPM")


def find_image(directory: PathLike, image_id: str) -> pathlib.Path:
    """Locates the file of an annotated image id inside a directory.

    The id may carry its own suffix; otherwise .pgm, .ppm and .png are tried.

    Raises:
        FileNotFoundError: If no candidate exists.
    """
    directory = pathlib.Path(directory)
    candidate = directory / image_id
    if candidate.is_file():
        return candidate
    for suffix in _SUFFIXES:
        with_suffix = directory / f"{image_id}{suffix}"
        if with_suffix.is_file():
            return with_suffix
    raise FileNotFoundError(f"no image for id {image_id!r} in {directory}")

"""Detection overlays with 5x7 bitmap score digits."""
from typing import Iterable, Tuple

import numpy as np
import PIL.Image
import PIL.ImageDraw

from densedet.imaging.image import Image

GLYPH_WIDTH = 5
GLYPH_HEIGHT = 7

# One string per row, '#' marks a lit pixel.
_GLYPHS = {
    "0": (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    "1": ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    "2": (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    "3": ("#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "),
    "4": ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    "5": ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    "6": ("  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "),
    "7": ("#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "),
    "8": (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    "9": (" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "),
    ".": ("     ", "     ", "     ", "     ", "     ", " ##  ", " ##  "),
}


def glyph_mask(char: str) -> np.ndarray:
    """The (7, 5) boolean bitmap of a digit or '.'."""
    return np.array([[c == "#" for c in row] for row in _GLYPHS[char]], dtype=bool)


def _draw_text(draw: PIL.ImageDraw.ImageDraw, text: str, x: int, y: int, color) -> None:
    for i, char in enumerate(text):
        rows, cols = np.nonzero(glyph_mask(char))
        left = x + i * (GLYPH_WIDTH + 1)
        draw.point([(left + int(c), y + int(r)) for r, c in zip(rows, cols)], fill=color)


def render_overlay(img: Image, detections: Iterable, color: Tuple[int, int, int] = (255, 0, 0)) -> Image:
    """Draws every detection outline with its score printed above it.

    Arguments:
        img: The original image.
        detections: Objects with .box and .score.
        color: RGB outline and text colour.

    Returns:
        A 3-channel image.
    """
    rgb = np.clip(np.floor(img.with_channels(3).data + 0.5), 0, 255).astype(np.uint8)
    pic = PIL.Image.fromarray(np.ascontiguousarray(np.transpose(rgb, (1, 2, 0))))
    draw = PIL.ImageDraw.Draw(pic)
    for det in detections:
        x0, y0 = int(round(det.box.x)), int(round(det.box.y))
        x1 = int(round(det.box.x + det.box.w)) - 1
        y1 = int(round(det.box.y + det.box.h)) - 1
        draw.rectangle([x0, y0, max(x0, x1), max(y0, y1)], outline=color)
        text_y = y0 - GLYPH_HEIGHT - 2 if y0 >= GLYPH_HEIGHT + 2 else y0 + 2
        _draw_text(draw, f"{det.score:.2f}", x0 + 1, text_y, color)
    return Image(np.transpose(np.asarray(pic, dtype=np.float32), (2, 0, 1)))

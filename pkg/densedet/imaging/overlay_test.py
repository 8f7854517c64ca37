import unittest

import numpy as np
from numpy.testing import assert_array_equal

from densedet.common.utils import Box
from densedet.detector.detection import Detection
from densedet.imaging import overlay
from densedet.imaging.image import Image


class OverlayTest(unittest.TestCase):
    def test_glyph_mask_success(self):
        """Verify digit bitmaps are 7 rows of 5 pixels."""
        for char in "0123456789.":
            self.assertEqual((7, 5), overlay.glyph_mask(char).shape)
        self.assertEqual(7, int(overlay.glyph_mask("1")[:, 2].sum()))

    def test_render_overlay_success_outline(self):
        """Verify the outline is drawn in the requested colour and the inside is untouched."""
        img = Image(np.full((1, 40, 40), 10.0))
        out = overlay.render_overlay(img, [Detection(Box(10, 15, 20, 20), 0.75)], color=(255, 0, 0))
        self.assertEqual((3, 40, 40), out.data.shape)
        assert_array_equal([255, 0, 0], out.data[:, 15, 10])
        assert_array_equal([255, 0, 0], out.data[:, 34, 29])
        assert_array_equal([10, 10, 10], out.data[:, 25, 20])

    def test_render_overlay_success_no_detections(self):
        """Verify an empty detection list only converts to colour."""
        img = Image(np.random.default_rng(0).integers(0, 256, (1, 8, 8)).astype(np.float32))
        out = overlay.render_overlay(img, [])
        assert_array_equal(np.repeat(img.data, 3, axis=0), out.data)


if __name__ == "__main__":
    unittest.main()

import unittest

from densedet.common import utils


class UtilsTest(unittest.TestCase):
    def test_round_half_up_success(self):
        """Verify halves round up."""
        self.assertEqual(128, utils.round_half_up(127.5))
        self.assertEqual(2, utils.round_half_up(2.49))
        self.assertEqual(3, utils.round_half_up(2.5))

    def test_box_scaled_success(self):
        """Verify scaling multiplies every coordinate."""
        self.assertEqual(utils.Box(0, 0, 7, 7), utils.Box(0, 0, 35, 35).scaled(0.2))

    def test_box_clamped_success_shrinks_boundary_box(self):
        """Verify clamping clips a box overhanging the canvas."""
        self.assertEqual(utils.Box(0, 5, 8, 5), utils.Box(-2, 5, 10, 10).clamped(20, 10))

    def test_box_clamped_success_outside_box_is_empty(self):
        """Verify a box outside the canvas clamps to zero area."""
        self.assertEqual(0.0, utils.Box(30, 30, 5, 5).clamped(20, 20).area)

    def test_box_center_success(self):
        """Verify the centre is at x + w/2, y + h/2."""
        self.assertEqual((5.0, 10.0), utils.Box(0, 0, 10, 20).center)

    def test_splitmix64_success_known_value(self):
        """Verify splitmix64 of 0 matches the reference generator's first output."""
        self.assertEqual(0xE220A8397B1DCDAF, utils.splitmix64(0))

    def test_derive_seed_success_distinct_and_stable(self):
        """Verify derived seeds are deterministic and differ per index."""
        seeds = [utils.derive_seed(42, i) for i in range(100)]
        self.assertEqual(seeds, [utils.derive_seed(42, i) for i in range(100)])
        self.assertEqual(100, len(set(seeds)))
        self.assertTrue(all(0 <= s < 2 ** 64 for s in seeds))


if __name__ == "__main__":
    unittest.main()

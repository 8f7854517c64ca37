import collections
import pathlib
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_array_equal

from densedet.common.errors import InvalidArgumentError
from densedet.common.utils import Box
from densedet.detector.nms import iou
from densedet.imaging.codec import read_image
from densedet.imaging.image import Image
from densedet.training import sampler

_FACE = Box(40, 40, 40, 40)


def _image(size=131, seed=0):
    return Image(np.random.default_rng(seed).uniform(0, 255, (size, size)))


def _pool(label, count, prefix):
    return [
        sampler.Patch(np.full((1, 35, 35), float(i)), label, sampler.PatchSource(f"{prefix}{i}", Box(0, 0, 35, 35)))
        for i in range(count)
    ]


class PositiveTest(unittest.TestCase):
    def test_is_positive_window_success(self):
        """Verify strict IOU acceptance and the identical-window rule."""
        self.assertTrue(sampler.is_positive_window(_FACE, [_FACE], 1.0))
        self.assertTrue(sampler.is_positive_window(Box(42, 40, 40, 40), [_FACE], 0.5))
        self.assertFalse(sampler.is_positive_window(Box(60, 60, 40, 40), [_FACE], 0.5))

    def test_sample_positives_success_overlap(self):
        """Verify every patch comes from a window overlapping the face by more than 0.5."""
        patches = sampler.sample_positives(_image(), [_FACE], 0.5, count=20, seed=1, image_id="a")
        self.assertEqual(20, len(patches))
        for p in patches:
            self.assertGreater(iou(p.source.box, _FACE), 0.5)
            self.assertEqual((1, 35, 35), p.tensor.shape)
            self.assertEqual(sampler.Label.FACE, p.label)
            self.assertEqual("a", p.source.image_id)

    def test_sample_positives_success_deterministic(self):
        """Verify the same seed reproduces the same patches."""
        first = sampler.sample_positives(_image(), [_FACE], count=5, seed=7)
        second = sampler.sample_positives(_image(), [_FACE], count=5, seed=7)
        self.assertEqual([p.source for p in first], [p.source for p in second])
        for a, b in zip(first, second):
            assert_array_equal(a.tensor, b.tensor)

    def test_sample_positives_success_crop_pixels(self):
        """Verify a window-sized source is copied without resampling."""
        img = _image()
        for p in sampler.sample_positives(img, [Box(40, 40, 35, 35)], count=10, seed=2):
            if p.source.box.w == 35:
                x, y = int(p.source.box.x), int(p.source.box.y)
                assert_array_equal(img.data[:, y : y + 35, x : x + 35], p.tensor)

    def test_sample_positives_fails_exhausted(self):
        """Verify an unreachable criterion exhausts the attempt budget."""
        with self.assertRaises(sampler.SamplingExhaustedError):
            sampler.sample_positives(_image(40), [Box(0, 0, 40, 40)], iou_min=0.99, count=5, seed=0)

    def test_sample_positives_fails_bad_arguments(self):
        """Verify a missing face or an iou_min outside (0, 1] is rejected."""
        with self.assertRaises(InvalidArgumentError):
            sampler.sample_positives(_image(), [])
        with self.assertRaises(InvalidArgumentError):
            sampler.sample_positives(_image(), [_FACE], iou_min=0.0)


class NegativeTest(unittest.TestCase):
    def test_sample_negatives_success_overlap(self):
        """Verify every negative overlaps the face by at most 0.3."""
        patches = sampler.sample_negatives(_image(), [_FACE], 0.3, count=40, seed=3)
        self.assertEqual(40, len(patches))
        for p in patches:
            self.assertLessEqual(iou(p.source.box, _FACE), 0.3)
            self.assertEqual(sampler.Label.BACKGROUND, p.label)
            self.assertTrue(7 <= p.source.box.w <= 131)

    def test_sample_negatives_success_no_faces(self):
        """Verify an image without faces accepts every window."""
        self.assertEqual(25, len(sampler.sample_negatives(_image(), [], count=25, seed=4)))

    def test_sample_negatives_success_deterministic(self):
        """Verify the same seed reproduces the same windows."""
        first = sampler.sample_negatives(_image(), [_FACE], count=8, seed=5)
        second = sampler.sample_negatives(_image(), [_FACE], count=8, seed=5)
        self.assertEqual([p.source for p in first], [p.source for p in second])

    def test_sample_negatives_fails_bad_threshold(self):
        """Verify iou_max must lie in [0, 1)."""
        with self.assertRaises(InvalidArgumentError):
            sampler.sample_negatives(_image(), [], iou_max=1.0)


class NearMissTest(unittest.TestCase):
    def test_sample_near_misses_success_overlap(self):
        """Verify every near miss touches a face with IOU in (0, 0.3]."""
        faces = [_FACE, Box(90, 20, 36, 36)]
        patches = sampler.sample_near_misses(_image(), faces, 0.3, count=40, seed=6, image_id="a")
        self.assertEqual(40, len(patches))
        for p in patches:
            best = max(iou(p.source.box, face) for face in faces)
            self.assertTrue(0.0 < best <= 0.3)
            self.assertEqual(sampler.Label.BACKGROUND, p.label)
            self.assertEqual((1, 35, 35), p.tensor.shape)
            box = p.source.box
            self.assertTrue(box.x >= 0 and box.y >= 0 and box.x + box.w <= 131 and box.y + box.h <= 131)

    def test_sample_near_misses_success_deterministic(self):
        """Verify the same seed reproduces the same windows."""
        first = sampler.sample_near_misses(_image(), [_FACE], count=8, seed=5)
        second = sampler.sample_near_misses(_image(), [_FACE], count=8, seed=5)
        self.assertEqual([p.source for p in first], [p.source for p in second])

    def test_sample_near_misses_fails_exhausted(self):
        """Verify a face filling the image leaves no room for near misses."""
        with self.assertRaises(sampler.SamplingExhaustedError):
            sampler.sample_near_misses(_image(40), [Box(0, 0, 40, 40)], count=3, seed=0)

    def test_sample_near_misses_fails_bad_arguments(self):
        """Verify a face is required and iou_max must lie in (0, 1)."""
        with self.assertRaises(InvalidArgumentError):
            sampler.sample_near_misses(_image(), [])
        with self.assertRaises(InvalidArgumentError):
            sampler.sample_near_misses(_image(), [_FACE], iou_max=0.0)


class FlipTest(unittest.TestCase):
    def test_flip_patch_success(self):
        """Verify the mirror mapping, the flag and the involution."""
        tensor = np.arange(12.0).reshape(1, 3, 4)
        p = sampler.Patch(tensor, sampler.Label.FACE, sampler.PatchSource("x", Box(0, 0, 4, 3)))
        flipped = sampler.flip_patch(p)
        self.assertTrue(flipped.flipped)
        self.assertEqual(p.label, flipped.label)
        for c in range(4):
            assert_array_equal(tensor[:, :, c], flipped.tensor[:, :, 3 - c])
        twice = sampler.flip_patch(flipped)
        self.assertFalse(twice.flipped)
        assert_array_equal(tensor, twice.tensor)

    def test_flip_patch_success_symmetric(self):
        """Verify a left-right symmetric patch keeps its pixels."""
        tensor = np.array([[[1.0, 2.0, 1.0], [5.0, 0.0, 5.0]]])
        p = sampler.Patch(tensor, sampler.Label.BACKGROUND, sampler.PatchSource("x", Box(0, 0, 3, 2)))
        assert_array_equal(tensor, sampler.flip_patch(p).tensor)


class BatchTest(unittest.TestCase):
    def test_batch_spec_success(self):
        """Verify 128 at one quarter is 32 + 96 and 4 is 1 + 3."""
        self.assertEqual((32, 96), (sampler.BatchSpec().positives, sampler.BatchSpec().negatives))
        self.assertEqual((1, 3), (sampler.BatchSpec(4).positives, sampler.BatchSpec(4).negatives))

    def test_batch_spec_fails_fractional(self):
        """Verify a size that does not split exactly is rejected."""
        with self.assertRaises(InvalidArgumentError):
            sampler.BatchSpec(size=10, positive_fraction=0.25)
        with self.assertRaises(InvalidArgumentError):
            sampler.BatchSpec(size=8, positive_fraction=1.0)

    def test_compose_batch_success_exact_counts(self):
        """Verify each of 10000 batches of 128 holds exactly 32 faces and 96 backgrounds."""
        positives, negatives = _pool(sampler.Label.FACE, 6, "p"), _pool(sampler.Label.BACKGROUND, 9, "n")
        for seed in range(10000):
            batch = sampler.compose_batch(positives, negatives, sampler.BatchSpec(), seed, flip_probability=0.0)
            self.assertEqual(128, len(batch))
            labels = collections.Counter(p.label for p in batch)
            self.assertEqual(32, labels[sampler.Label.FACE])
            self.assertEqual(96, labels[sampler.Label.BACKGROUND])

    def test_compose_batch_success_uniform(self):
        """Verify each positive is drawn with uniform frequency."""
        positives, negatives = _pool(sampler.Label.FACE, 5, "p"), _pool(sampler.Label.BACKGROUND, 5, "n")
        counts = collections.Counter()
        draws = 10000
        for seed in range(draws):
            batch = sampler.compose_batch(positives, negatives, sampler.BatchSpec(4), seed)
            counts.update(p.source.image_id for p in batch if p.label == sampler.Label.FACE)
        sigma = np.sqrt(draws * 0.2 * 0.8)
        for i in range(5):
            self.assertLess(abs(counts[f"p{i}"] - draws * 0.2), 5 * sigma)

    def test_compose_batch_success_deterministic(self):
        """Verify a seed fixes order, members and flips."""
        positives, negatives = _pool(sampler.Label.FACE, 3, "p"), _pool(sampler.Label.BACKGROUND, 3, "n")
        first = sampler.compose_batch(positives, negatives, sampler.BatchSpec(8), 11)
        second = sampler.compose_batch(positives, negatives, sampler.BatchSpec(8), 11)
        self.assertEqual([(p.source, p.flipped) for p in first], [(p.source, p.flipped) for p in second])

    def test_compose_batch_success_flip_probability(self):
        """Verify probability 0 never flips and 1 always flips."""
        positives, negatives = _pool(sampler.Label.FACE, 2, "p"), _pool(sampler.Label.BACKGROUND, 2, "n")
        never = sampler.compose_batch(positives, negatives, sampler.BatchSpec(8), 0, flip_probability=0.0)
        always = sampler.compose_batch(positives, negatives, sampler.BatchSpec(8), 0, flip_probability=1.0)
        self.assertFalse(any(p.flipped for p in never))
        self.assertTrue(all(p.flipped for p in always))

    def test_compose_batch_fails_empty_pool(self):
        """Verify an empty pool is rejected."""
        with self.assertRaises(InvalidArgumentError):
            sampler.compose_batch([], _pool(sampler.Label.BACKGROUND, 2, "n"))

    def test_stack_batch_success(self):
        """Verify inputs and labels are stacked in batch order."""
        batch = _pool(sampler.Label.FACE, 2, "p") + _pool(sampler.Label.BACKGROUND, 1, "n")
        x, labels = sampler.stack_batch(batch)
        self.assertEqual((3, 1, 35, 35), x.shape)
        self.assertEqual(np.float64, x.dtype)
        assert_array_equal([1, 1, 0], labels)


class PoolTest(unittest.TestCase):
    def test_build_pools_success_counts(self):
        """Verify per-face and per-image counts and seed determinism."""
        items = [("a", _image(seed=1), [_FACE]), ("b", _image(seed=2), [])]
        cfg = sampler.SamplerConfig(positives_per_face=3, negatives_per_image=4, near_misses_per_face=2)
        positives, negatives = sampler.build_pools(items, cfg, seed=9)
        self.assertEqual(3, len(positives))
        self.assertEqual(10, len(negatives))
        near = [p for p in negatives if p.source.image_id == "a" and iou(p.source.box, _FACE) > 0.0]
        self.assertGreaterEqual(len(near), 2)
        again = sampler.build_pools(items, cfg, seed=9)
        self.assertEqual([p.source for p in positives], [p.source for p in again[0]])

    def test_build_pools_success_skips_exhausted_image(self):
        """Verify an image that cannot supply negatives is skipped entirely."""
        full = Box(0, 0, 10, 10)
        items = [("tiny", _image(10), [full]), ("ok", _image(seed=3), [_FACE])]
        cfg = sampler.SamplerConfig(positives_per_face=2, negatives_per_image=2)
        with self.assertLogs("densedet.training.sampler", level="WARNING"):
            positives, negatives = sampler.build_pools(items, cfg)
        self.assertEqual({"ok"}, {p.source.image_id for p in positives + negatives})

    def test_write_patches_success(self):
        """Verify one PGM per patch and a matching index."""
        patches = _pool(sampler.Label.FACE, 2, "p")
        with tempfile.TemporaryDirectory() as tmp:
            index = sampler.write_patches(patches, tmp)
            rows = [line.split("\t") for line in index.read_text().splitlines()]
            self.assertEqual(["patch_000001.pgm", "face", "p1", "0", "0", "35", "35", "0"], rows[1])
            self.assertEqual((1, 35, 35), read_image(pathlib.Path(tmp) / "patch_000000.pgm").data.shape)


class PoseTest(unittest.TestCase):
    def test_pose_histogram_success_empty(self):
        """Verify no annotations give all-zero histograms over 36 bins."""
        hist = sampler.pose_histogram([])
        self.assertEqual(37, len(hist.edges))
        for counts in (hist.roll, hist.pitch, hist.yaw):
            assert_array_equal(np.zeros(36), counts)

    def test_pose_histogram_success_centre_bin(self):
        """Verify a frontal face lands in the bin starting at 0 degrees."""
        hist = sampler.pose_histogram([sampler.PoseAnnotation(0.0, 0.0, 0.0)])
        for counts in (hist.roll, hist.pitch, hist.yaw):
            self.assertEqual(1, counts[18])
            self.assertEqual(1, counts.sum())
        self.assertEqual(0.0, hist.edges[18])

    def test_pose_histogram_success_wraps(self):
        """Verify 180 wraps to -180 and counts are conserved."""
        annos = [sampler.PoseAnnotation(180.0, -180.0, 179.9), sampler.PoseAnnotation(-35.0, 45.0, 370.0)]
        hist = sampler.pose_histogram(annos)
        self.assertEqual(1, hist.roll[0])
        self.assertEqual(1, hist.pitch[0])
        self.assertEqual(1, hist.yaw[35])
        self.assertEqual(1, hist.yaw[19])
        self.assertEqual(1, hist.roll[14])
        for counts in (hist.roll, hist.pitch, hist.yaw):
            self.assertEqual(2, counts.sum())

    def test_pose_histogram_fails_bad_width(self):
        """Verify a non-positive bin width is rejected."""
        with self.assertRaises(InvalidArgumentError):
            sampler.pose_histogram([], bin_width=0.0)

    def test_pose_score_profile_success(self):
        """Verify bin means and nan for empty bins."""
        annos = [sampler.PoseAnnotation(0.0, 0.0, 0.0), sampler.PoseAnnotation(5.0, 0.0, 0.0)]
        profile = sampler.pose_score_profile(annos, [0.2, 0.6])
        self.assertAlmostEqual(0.4, profile["roll"][18])
        self.assertTrue(np.isnan(profile["roll"][0]))

    def test_parse_pose_file_success(self):
        """Verify comments, blank lines and comma separators."""
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp) / "poses.txt"
            path.write_text("# id roll pitch yaw\n\nimg1 1 2 3\nimg2, -4.5, 0, 90\n")
            annos = sampler.parse_pose_file(path)
        expected = [sampler.PoseAnnotation(1.0, 2.0, 3.0, "img1"), sampler.PoseAnnotation(-4.5, 0.0, 90.0, "img2")]
        self.assertEqual(expected, annos)

    def test_parse_pose_file_fails_names_line(self):
        """Verify a malformed line is reported with its number."""
        with tempfile.TemporaryDirectory() as tmp:
            path = pathlib.Path(tmp) / "poses.txt"
            path.write_text("img1 1 2 3\nimg2 1 2\n")
            with self.assertRaises(InvalidArgumentError) as ctx:
                sampler.parse_pose_file(path)
        self.assertIn(":2:", str(ctx.exception))

    def test_format_histograms_success(self):
        """Verify a header plus one row per bin."""
        hist = sampler.pose_histogram([sampler.PoseAnnotation(0.0, 0.0, 0.0)], bin_width=90.0)
        lines = sampler.format_histograms(hist).splitlines()
        self.assertEqual("bin_start\tbin_end\troll\tpitch\tyaw", lines[0])
        self.assertEqual("0\t90\t1\t1\t1", lines[3])
        self.assertEqual(5, len(lines))


if __name__ == "__main__":
    unittest.main()

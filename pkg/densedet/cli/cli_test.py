import argparse
import io
import json
import pathlib
import sys
import tempfile
import unittest

import mock

from densedet.cli import app
from densedet.config import config
from densedet.detector.nms import Strategy

_FIXTURE = str(pathlib.Path(__file__).resolve().parents[1] / "nnet" / "testdata" / "mininet")
_FAST_CFG = "pyramid:\n  upscale: 1\ndetect:\n  score_floor: 0.0\n"


def _run(*argv):
    """Runs the command line, returning the exit code, stdout and stderr."""
    stdout, stderr = io.StringIO(), io.StringIO()
    with mock.patch.object(sys, "stdout", stdout), mock.patch.object(sys, "stderr", stderr):
        code = app.run([str(a) for a in argv])
    return code, stdout.getvalue(), stderr.getvalue()


class UsageTest(unittest.TestCase):
    def setUp(self):
        config.load_config.cache_clear()

    def test_run_fails_unknown_flag(self):
        """Test an unknown flag is a usage error."""
        code, _, err = _run("detect", "--model", _FIXTURE, "--image", "x.pgm", "--bogus")
        self.assertEqual(app.EXIT_USAGE, code)
        self.assertIn("--bogus", err)

    def test_run_fails_missing_command(self):
        """Test a command is required."""
        self.assertEqual(app.EXIT_USAGE, _run()[0])

    def test_run_success_help(self):
        """Test --help exits cleanly."""
        code, out, _ = _run("--help")
        self.assertEqual(app.EXIT_OK, code)
        self.assertIn("model-info", out)

    def test_run_fails_missing_model(self):
        """Test a missing model file is reported as one error line."""
        code, _, err = _run("model-info", "--model", "/nonexistent/model")
        self.assertEqual(app.EXIT_FAILURE, code)
        self.assertEqual(1, sum(1 for line in err.splitlines() if line.startswith("error: ")))

    def test_run_fails_missing_config(self):
        """Test a missing configuration file is an operational failure."""
        code, _, err = _run("--config", "/nonexistent/densedet.yaml", "model-info", "--model", _FIXTURE)
        self.assertEqual(app.EXIT_FAILURE, code)
        self.assertIn("error: ConfigFileNotFoundError:", err)

    def test_model_info_success(self):
        """Test the fixture description."""
        code, out, _ = _run("model-info", "--model", _FIXTURE)
        self.assertEqual(app.EXIT_OK, code)
        for line in ("input_channels: 1", "window: 35", "stride: 4", "geometry_exact: true", "parameters: 5058"):
            self.assertIn(line + "\n", out)

    def test_detect_config_success_overrides(self):
        """Test switching strategy takes that strategy's default threshold."""
        flags = {"fs": None, "upscale": 2.0, "score_floor": None, "threads": None}
        cfg = config.Config()
        detect_cfg = app._detect_config(argparse.Namespace(nms="max", nms_threshold=None, **flags), cfg)
        self.assertEqual((Strategy.MAX, 0.3), (detect_cfg.nms.strategy, detect_cfg.nms.overlap_threshold))
        self.assertEqual(2.0, detect_cfg.pyramid.upscale)
        detect_cfg = app._detect_config(argparse.Namespace(nms=None, nms_threshold=0.5, **flags), cfg)
        self.assertEqual((Strategy.AVG, 0.5), (detect_cfg.nms.strategy, detect_cfg.nms.overlap_threshold))


class PipelineTest(unittest.TestCase):
    def setUp(self):
        config.load_config.cache_clear()
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = pathlib.Path(self.tmp.name)
        self.corpus = self.dir / "corpus"
        code, out, _ = _run("synthesize", "--out", self.corpus, "--count", 2, "--seed", 7)
        self.assertEqual(app.EXIT_OK, code)
        self.assertIn("images: 2\n", out)
        self.gt = self.corpus / "gt.txt"

    def test_detect_success_deterministic(self):
        """Test two runs write identical detections, plus overlay and heat-maps."""
        outputs = []
        for run in range(2):
            dets = self.dir / f"dets{run}.jsonl"
            code, _, _ = _run(
                "detect", "--model", _FIXTURE, "--image", self.corpus / "img_0000.pgm", "--upscale", 1,
                "--out", dets, "--overlay", self.dir / "overlay.ppm", "--heatmap-out", self.dir / "heat",
            )
            self.assertEqual(app.EXIT_OK, code)
            outputs.append(dets.read_bytes())
        self.assertEqual(outputs[0], outputs[1])
        for line in outputs[0].decode().splitlines():
            self.assertEqual("img_0000", json.loads(line)["image_id"])
        self.assertTrue((self.dir / "overlay.ppm").is_file())
        self.assertTrue((self.dir / "heat" / "img_0000_level00.pgm").is_file())

    def test_eval_success_perfect(self):
        """Test ground truth scored as detections gives AP 1."""
        dets = self.dir / "dets.jsonl"
        records = []
        for line in self.gt.read_text().splitlines():
            image_id, x, y, w, h = line.split()
            records.append(json.dumps({"image_id": image_id, "x": x, "y": y, "width": w, "height": h, "score": 1.0}))
        dets.write_text("\n".join(records) + "\n")
        code, out, _ = _run("eval", "--dets", dets, "--gt", self.gt, "--pr-out", self.dir / "pr.csv")
        self.assertEqual(app.EXIT_OK, code)
        self.assertIn("average_precision: 1.000000\n", out)
        self.assertTrue((self.dir / "pr.csv").read_text().startswith("threshold,recall,precision\n"))

    def test_eval_fails_missing_detections(self):
        """Test a missing detection file is reported by kind."""
        code, _, err = _run("eval", "--dets", self.dir / "none.jsonl", "--gt", self.gt, "--pr-out", self.dir / "pr.csv")
        self.assertEqual(app.EXIT_FAILURE, code)
        self.assertIn("error: EvaluationInputError:", err)

    def test_train_success(self):
        """Test short training runs write identical loadable models and risk traces."""
        for run in range(2):
            code, _, _ = _run(
                "train", "--images", self.corpus, "--gt", self.gt, "--iterations", 3, "--seed", 1,
                "--out", self.dir / f"trained{run}", "--trace-out", self.dir / f"trace{run}.csv",
            )
            self.assertEqual(app.EXIT_OK, code)
        trace = (self.dir / "trace0.csv").read_text()
        self.assertEqual(4, len(trace.splitlines()))
        self.assertEqual(trace, (self.dir / "trace1.csv").read_text())
        self.assertEqual((self.dir / "trained0.weights").read_bytes(), (self.dir / "trained1.weights").read_bytes())
        prefix = self.dir / "trained0"
        code, out, _ = _run("model-info", "--model", prefix)
        self.assertEqual(app.EXIT_OK, code)
        self.assertIn("parameters: 5058\n", out)

    def test_train_fails_init_without_model(self):
        """Test --init model needs --model."""
        code, _, err = _run("train", "--init", "model", "--images", self.corpus, "--gt", self.gt, "--out", self.dir / "m")
        self.assertEqual(app.EXIT_FAILURE, code)
        self.assertIn("error: Error: --init model needs --model", err)

    def test_sample_success(self):
        """Test patches and their index are written."""
        out_dir = self.dir / "patches"
        code, out, _ = _run(
            "sample", "--images", self.corpus, "--gt", self.gt, "--out", out_dir,
            "--positives-per-face", 2, "--negatives-per-image", 3, "--near-misses-per-face", 1,
        )
        self.assertEqual(app.EXIT_OK, code)
        faces = len(self.gt.read_text().splitlines())
        self.assertIn(f"negatives: {6 + faces}\n", out)
        rows = (out_dir / "index.tsv").read_text().splitlines()
        self.assertEqual(3 * faces + 6, len(rows))
        self.assertTrue((out_dir / rows[0].split("\t")[0]).is_file())

    def test_train_regressor_success(self):
        """Test a regressor is fitted on the fixture's features."""
        cfg_path = self.dir / "fast.yaml"
        cfg_path.write_text(_FAST_CFG)
        code, out, _ = _run(
            "--config", cfg_path, "train-regressor", "--model", _FIXTURE, "--images", self.corpus, "--gt", self.gt,
            "--out", self.dir / "reg",
        )
        self.assertEqual(app.EXIT_OK, code)
        self.assertIn("feature_dim: 288\n", out)
        self.assertTrue((self.dir / "reg.yaml").is_file())
        self.assertTrue((self.dir / "reg.weights").is_file())

    def test_analyze_poses_success(self):
        """Test pose histograms with per-bin scores."""
        poses, scores = self.dir / "poses.txt", self.dir / "scores.txt"
        poses.write_text("a 0 0 0\nb 5, -5, 45\n")
        scores.write_text("a 0.5\nb 1.0\n")
        code, out, _ = _run("analyze-poses", "--poses", poses, "--scores", scores)
        self.assertEqual(app.EXIT_OK, code)
        lines = out.splitlines()
        self.assertEqual("bin_start\tbin_end\troll\tpitch\tyaw\troll_score\tpitch_score\tyaw_score", lines[0])
        self.assertEqual(37, len(lines))


if __name__ == "__main__":
    unittest.main()

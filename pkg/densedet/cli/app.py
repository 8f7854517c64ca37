#!/usr/bin/env python3
"""The densedet command line.

Exit codes: 0 on success, 1 on an operational failure (reported as a single
"error: <kind>: <message>" line on stderr), 2 on a usage error.
"""
import argparse
import dataclasses
import logging
import pathlib
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from densedet.common.errors import Error
from densedet.common.utils import Box
from densedet.config import config
from densedet.detector import dense
from densedet.detector.detection import to_json_line
from densedet.detector.nms import OverlapConfig, Strategy
from densedet.detector.regressor import build_regression_pairs, train_regressor
from densedet.evaluation import evaluate, sweep
from densedet.imaging.codec import find_image, read_image, write_image
from densedet.imaging.image import Image
from densedet.imaging.overlay import render_overlay
from densedet.nnet import model_io, zoo
from densedet.nnet.network import NetworkSpec, describe, receptive_geometry
from densedet.training import sampler, synthetic, trainer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

_LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def _load_net(prefix: str) -> NetworkSpec:
    return model_io.load_model(*model_io.model_paths(prefix))


def _annotated_images(images_dir: str, gt_path: str, channels: int) -> List[Tuple[str, Image, List[Box]]]:
    items = []
    for gt in evaluate.parse_rect_annotations(gt_path):
        img = read_image(find_image(images_dir, gt.image_id)).with_channels(channels)
        items.append((gt.image_id, img, gt.boxes))
    return items


def _detect_config(args: argparse.Namespace, cfg: config.Config) -> dense.DetectConfig:
    """The configured detector settings with command-line overrides applied."""
    base = cfg.detect
    pyramid = dataclasses.replace(
        base.pyramid,
        fs=args.fs if args.fs is not None else base.pyramid.fs,
        upscale=args.upscale if args.upscale is not None else base.pyramid.upscale,
    )
    nms = base.nms
    if args.nms is not None or args.nms_threshold is not None:
        strategy = Strategy(args.nms) if args.nms is not None else nms.strategy
        threshold = args.nms_threshold
        if threshold is None and strategy == nms.strategy:
            threshold = nms.overlap_threshold
        nms = OverlapConfig(strategy, threshold, nms.confidence_floor, nms.keep_ratio)
    return dense.DetectConfig(
        pyramid=pyramid,
        score_floor=args.score_floor if args.score_floor is not None else base.score_floor,
        nms=nms,
        threads=args.threads if args.threads is not None else base.threads,
    )


def cmd_detect(args: argparse.Namespace, cfg: config.Config) -> int:
    net = _load_net(args.model)
    regressor = model_io.load_regressor(*model_io.model_paths(args.regressor)) if args.regressor else None
    img = read_image(args.image)
    image_id = args.image_id or pathlib.Path(args.image).stem
    detect_cfg = _detect_config(args, cfg)
    dets = dense.detect(net, img, detect_cfg, regressor)
    lines = "".join(to_json_line(d, image_id) + "\n" for d in dets)
    if args.out:
        pathlib.Path(args.out).write_text(lines)
    else:
        sys.stdout.write(lines)
    if args.overlay:
        write_image(render_overlay(img, dets), args.overlay)
    if args.heatmap_out:
        out_dir = pathlib.Path(args.heatmap_out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for hm in dense.level_heatmaps(net, img, detect_cfg):
            write_image(dense.render_heatmap(hm), out_dir / f"{image_id}_level{hm.level_index:02d}.pgm")
    logger.info("detect image=%s dets=%d", image_id, len(dets))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, cfg: config.Config) -> int:
    report = evaluate.evaluate(args.dets, args.gt, args.format, args.iou)
    evaluate.write_pr_csv(report.curve, args.pr_out)
    sys.stdout.write(evaluate.format_report(report))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: config.Config) -> int:
    if args.init == "model":
        if not args.model:
            raise Error("--init model needs --model")
        net = _load_net(args.model)
    else:
        net = zoo.build_mininet(seed=args.seed if args.seed is not None else cfg.train.seed)
    window = receptive_geometry(net).window
    train_cfg = dataclasses.replace(
        cfg.train,
        iterations=args.iterations if args.iterations is not None else cfg.train.iterations,
        seed=args.seed if args.seed is not None else cfg.train.seed,
        learning_rate=args.learning_rate if args.learning_rate is not None else cfg.train.learning_rate,
    )
    items = _annotated_images(args.images, args.gt, net.input_channels)
    positives, negatives = sampler.build_pools(items, dataclasses.replace(cfg.sampler, window=window), train_cfg.seed)
    trained, trace = trainer.finetune(net, positives, negatives, train_cfg)
    model_io.save_model(trained, *model_io.model_paths(args.out))
    if args.trace_out:
        trainer.write_risk_trace(trace, args.trace_out)
    logger.info("train iterations=%d first_risk=%.6f last_risk=%.6f", len(trace), trace[0], trace[-1])
    return EXIT_OK


def cmd_sample(args: argparse.Namespace, cfg: config.Config) -> int:
    window, channels = cfg.sampler.window, 1
    if args.model:
        net = _load_net(args.model)
        window, channels = receptive_geometry(net).window, net.input_channels
    sample_cfg = dataclasses.replace(
        cfg.sampler,
        window=window,
        positives_per_face=args.positives_per_face
        if args.positives_per_face is not None
        else cfg.sampler.positives_per_face,
        negatives_per_image=args.negatives_per_image
        if args.negatives_per_image is not None
        else cfg.sampler.negatives_per_image,
        near_misses_per_face=args.near_misses_per_face
        if args.near_misses_per_face is not None
        else cfg.sampler.near_misses_per_face,
    )
    items = _annotated_images(args.images, args.gt, channels)
    seed = args.seed if args.seed is not None else cfg.train.seed
    positives, negatives = sampler.build_pools(items, sample_cfg, seed)
    index = sampler.write_patches(positives + negatives, args.out)
    sys.stdout.write(f"positives: {len(positives)}\nnegatives: {len(negatives)}\nindex: {index}\n")
    return EXIT_OK


def _read_scores(path: str) -> Dict[str, float]:
    scores = {}
    with open(path, "r") as stream:
        for lineno, line in enumerate(stream, start=1):
            fields = line.split()
            if not fields or fields[0].startswith("#"):
                continue
            if len(fields) != 2:
                raise evaluate.AnnotationParseError(f"{path}:{lineno}: expected 'image-id score'")
            try:
                scores[fields[0]] = float(fields[1])
            except ValueError as e:
                raise evaluate.AnnotationParseError(f"{path}:{lineno}: {e}") from e
    return scores


def cmd_analyze_poses(args: argparse.Namespace, cfg: config.Config) -> int:
    annos = sampler.parse_pose_file(args.poses)
    profile = None
    if args.scores:
        scores = _read_scores(args.scores)
        scored = [a for a in annos if a.image_id in scores]
        if len(scored) < len(annos):
            logger.warning("%d pose annotations have no score", len(annos) - len(scored))
        profile = sampler.pose_score_profile(scored, [scores[a.image_id] for a in scored], args.bin_width)
    hist = sampler.pose_histogram(annos, args.bin_width)
    sys.stdout.write(sampler.format_histograms(hist, profile))
    return EXIT_OK


def cmd_model_info(args: argparse.Namespace, cfg: config.Config) -> int:
    net = _load_net(args.model)
    geometry = receptive_geometry(net)
    lines = [
        f"input_channels: {net.input_channels}",
        f"mean: {list(net.mean)}",
        f"scale: {net.scale!r}",
        f"window: {geometry.window}",
        f"stride: {geometry.stride}",
        f"geometry_exact: {str(geometry.valid).lower()}",
        f"parameters: {net.parameter_count}",
        "layers:",
    ]
    lines += [f"  {line}" for line in describe(net)]
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_synthesize(args: argparse.Namespace, cfg: config.Config) -> int:
    corpus = synthetic.generate_corpus(args.count, args.size, args.seed)
    gt_path = synthetic.write_corpus(corpus, args.out)
    sys.stdout.write(f"images: {len(corpus)}\nground_truth: {gt_path}\n")
    return EXIT_OK


def cmd_train_regressor(args: argparse.Namespace, cfg: config.Config) -> int:
    net = _load_net(args.model)
    ridge_lambda = args.ridge_lambda if args.ridge_lambda is not None else cfg.regressor.ridge_lambda
    pair_iou = args.pair_iou if args.pair_iou is not None else cfg.regressor.pair_iou
    samples = []
    for image_id, img, gts in _annotated_images(args.images, args.gt, net.input_channels):
        raw = dense.detect_raw(net, img, cfg.detect, keep_features=True)
        pairs = build_regression_pairs(raw, gts, pair_iou)
        logger.debug("regression pairs image=%s pairs=%d", image_id, len(pairs))
        samples += pairs
    model = train_regressor(samples, ridge_lambda)
    model_io.save_regressor(model, *model_io.model_paths(args.out))
    sys.stdout.write(f"samples: {len(samples)}\nfeature_dim: {model.feature_dim}\n")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, cfg: config.Config) -> int:
    net = _load_net(args.model)
    truths = evaluate.parse_annotations(args.gt, args.format)
    images = [(gt.image_id, read_image(find_image(args.images, gt.image_id))) for gt in truths]
    if args.kind == "fs":
        results = sweep.sweep_scale_factors(net, images, truths, cfg=cfg.detect, iou_min=args.iou)
        sys.stdout.write(sweep.format_fs_sweep(results))
    else:
        raw = sweep.collect_raw(net, images, cfg.detect)
        results = sweep.sweep_nms(raw, truths, base=cfg.detect.nms, iou_min=args.iou)
        sys.stdout.write(sweep.format_nms_sweep(results))
    return EXIT_OK


def _add_detect_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, help="model prefix: PREFIX.yaml + PREFIX.weights")
    parser.add_argument("--image", required=True)
    parser.add_argument("--image-id", help="id written to every record (default: image file stem)")
    parser.add_argument("--fs", type=float, help="pyramid ratio (default 0.793701)")
    parser.add_argument("--upscale", type=float, help="first level scale (default 5)")
    parser.add_argument("--nms", choices=[s.value for s in Strategy], help="suppression strategy (default avg)")
    parser.add_argument("--nms-threshold", type=float, help="overlap threshold (default 0.3 max, 0.2 avg)")
    parser.add_argument("--score-floor", type=float, help="minimum cell score (default 0.01)")
    parser.add_argument("--regressor", help="regressor prefix, off by default")
    parser.add_argument("--threads", type=int, help="pyramid levels scanned concurrently (default 1)")
    parser.add_argument("--out", help="detections as JSON lines (default: stdout)")
    parser.add_argument("--overlay", help="write an annotated copy of the image")
    parser.add_argument("--heatmap-out", help="directory for per-level heat-map images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="densedet", description="Dense sliding-window face detection.")
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--log-level", type=str.upper, choices=config.LOG_LEVELS, help="default from config, else INFO")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    def command(name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    _add_detect_flags(command("detect", cmd_detect, "detect faces in one image"))

    sub = command("eval", cmd_eval, "evaluate detections against ground truth")
    sub.add_argument("--dets", required=True)
    sub.add_argument("--gt", required=True)
    sub.add_argument("--format", choices=evaluate.FORMATS, default="rect")
    sub.add_argument("--iou", type=float, default=evaluate.DEFAULT_IOU)
    sub.add_argument("--pr-out", required=True, help="precision-recall CSV")

    sub = command("train", cmd_train, "train a network on annotated images")
    sub.add_argument("--init", choices=["random", "model"], default="random")
    sub.add_argument("--model", help="initial model prefix for --init model")
    sub.add_argument("--images", required=True)
    sub.add_argument("--gt", required=True, help="rect ground truth")
    sub.add_argument("--iterations", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--learning-rate", type=float)
    sub.add_argument("--out", required=True, help="output model prefix")
    sub.add_argument("--trace-out", help="risk trace CSV")

    sub = command("sample", cmd_sample, "dump training patches")
    sub.add_argument("--images", required=True)
    sub.add_argument("--gt", required=True)
    sub.add_argument("--out", required=True, help="patch directory")
    sub.add_argument("--model", help="take the patch size from this model")
    sub.add_argument("--positives-per-face", type=int)
    sub.add_argument("--negatives-per-image", type=int)
    sub.add_argument("--near-misses-per-face", type=int)
    sub.add_argument("--seed", type=int)

    sub = command("analyze-poses", cmd_analyze_poses, "pose histograms and per-pose scores")
    sub.add_argument("--poses", required=True, help="'image-id roll pitch yaw' lines")
    sub.add_argument("--scores", help="'image-id score' lines")
    sub.add_argument("--bin-width", type=float, default=10.0)

    sub = command("model-info", cmd_model_info, "describe a model")
    sub.add_argument("--model", required=True)

    sub = command("synthesize", cmd_synthesize, "generate a synthetic corpus")
    sub.add_argument("--out", required=True)
    sub.add_argument("--count", type=int, default=200)
    sub.add_argument("--size", type=int, default=131)
    sub.add_argument("--seed", type=int, default=0)

    sub = command("train-regressor", cmd_train_regressor, "fit a box regressor")
    sub.add_argument("--model", required=True)
    sub.add_argument("--images", required=True)
    sub.add_argument("--gt", required=True)
    sub.add_argument("--out", required=True, help="output regressor prefix")
    sub.add_argument("--lambda", dest="ridge_lambda", type=float)
    sub.add_argument("--pair-iou", type=float)

    sub = command("sweep", cmd_sweep, "sweep pyramid ratio or suppression settings")
    sub.add_argument("--kind", choices=["fs", "nms"], required=True)
    sub.add_argument("--model", required=True)
    sub.add_argument("--images", required=True)
    sub.add_argument("--gt", required=True)
    sub.add_argument("--format", choices=evaluate.FORMATS, default="rect")
    sub.add_argument("--iou", type=float, default=evaluate.DEFAULT_IOU)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parses argv and runs the chosen command.

    Returns:
        The process exit code.
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(stream=sys.stderr, format=_LOG_FORMAT, force=True)
    try:
        cfg = config.load_config(args.config)
        logging.getLogger("densedet").setLevel(args.log_level or cfg.log_level)
        return args.handler(args, cfg)
    except (Error, OSError) as e:
        message = str(e).replace("\n", " ")
        sys.stderr.write(f"error: {type(e).__name__}: {message}\n")
        return EXIT_FAILURE


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

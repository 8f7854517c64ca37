"""Operating-point sweeps over the pyramid scale factor and the suppression settings."""
import dataclasses
import logging
from typing import Dict, List, Sequence, Tuple

from densedet.detector.dense import DetectConfig, detect, detect_raw
from densedet.detector.detection import Detection
from densedet.detector.nms import OverlapConfig, Strategy, suppress
from densedet.evaluation.evaluate import DEFAULT_IOU, GroundTruth, PRCurve, evaluate_detections
from densedet.imaging.image import Image
from densedet.imaging.pyramid import CANDIDATE_FS
from densedet.nnet.network import NetworkSpec

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


def sweep_scale_factors(
    net: NetworkSpec,
    images: Sequence[Tuple[str, Image]],
    truths: Sequence[GroundTruth],
    factors: Sequence[float] = CANDIDATE_FS,
    cfg: DetectConfig = DetectConfig(),
    iou_min: float = DEFAULT_IOU,
) -> Dict[float, Tuple[PRCurve, float]]:
    """Runs the full detector once per pyramid ratio.

    Returns:
        {fs: (curve, AP)} in the order of factors.
    """
    results = {}
    for fs in factors:
        level_cfg = dataclasses.replace(cfg, pyramid=dataclasses.replace(cfg.pyramid, fs=fs))
        dets = {image_id: detect(net, img, level_cfg) for image_id, img in images}
        report = evaluate_detections(dets, truths, iou_min)
        logger.info("sweep fs=%.6f ap=%.6f", fs, report.average_precision)
        results[fs] = (report.curve, report.average_precision)
    return results


def collect_raw(net: NetworkSpec, images: Sequence[Tuple[str, Image]], cfg: DetectConfig) -> Dict[str, List[Detection]]:
    """Pre-suppression detections of every image."""
    return {image_id: detect_raw(net, img, cfg) for image_id, img in images}


def sweep_nms(
    raw: Dict[str, Sequence[Detection]],
    truths: Sequence[GroundTruth],
    strategies: Sequence[Strategy] = (Strategy.MAX, Strategy.AVG),
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    base: OverlapConfig = OverlapConfig(),
    iou_min: float = DEFAULT_IOU,
) -> Dict[Tuple[Strategy, float], float]:
    """AP of every (strategy, overlap threshold) pair on the same raw detections.

    Arguments:
        raw: Pre-suppression detections per image id.
        truths: Ground truth.
        strategies: Strategies to try.
        thresholds: Overlap thresholds to try.
        base: Supplies the avg confidence floor and keep ratio.
        iou_min: Match threshold.

    Returns:
        {(strategy, threshold): AP}.
    """
    results = {}
    for strategy in strategies:
        for threshold in thresholds:
            cfg = dataclasses.replace(base, strategy=Strategy(strategy), overlap_threshold=threshold)
            kept = {image_id: suppress(dets, cfg) for image_id, dets in raw.items()}
            ap = evaluate_detections(kept, truths, iou_min).average_precision
            logger.info("sweep nms=%s threshold=%g ap=%.6f", cfg.strategy.value, threshold, ap)
            results[(cfg.strategy, threshold)] = ap
    return results


def format_fs_sweep(results: Dict[float, Tuple[PRCurve, float]]) -> str:
    lines = ["fs\taverage_precision"]
    lines += [f"{fs:.6f}\t{ap:.6f}" for fs, (_, ap) in results.items()]
    return "\n".join(lines) + "\n"


def format_nms_sweep(results: Dict[Tuple[Strategy, float], float]) -> str:
    lines = ["strategy\tthreshold\taverage_precision"]
    lines += [f"{strategy.value}\t{threshold:g}\t{ap:.6f}" for (strategy, threshold), ap in results.items()]
    return "\n".join(lines) + "\n"

"""Ground-truth parsing, detection matching, precision-recall curves and AP."""
import csv
import dataclasses
import json
import logging
import math
import pathlib
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from densedet.common.errors import Error, InvalidArgumentError
from densedet.common.utils import Box
from densedet.detector.detection import Detection, from_record
from densedet.detector.nms import iou

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

DEFAULT_IOU = 0.5
FORMATS = ("rect", "fddb")


class AnnotationParseError(Error):
    """A ground-truth or detection file could not be parsed."""


class EvaluationInputError(Error):
    """Evaluation inputs are missing or unusable."""


@dataclasses.dataclass
class GroundTruth:
    image_id: str
    boxes: List[Box] = dataclasses.field(default_factory=list)


class LabeledDetection(NamedTuple):
    """A detection with its matching verdict.

    Attributes:
        detection: The detection.
        true_positive: Whether it matched a ground-truth box.
        matched_gt: Index of the matched box within its image, or None.
        image_id: The image the detection belongs to.
    """

    detection: Detection
    true_positive: bool
    matched_gt: Optional[int]
    image_id: str = ""


class PRPoint(NamedTuple):
    recall: float
    precision: float
    threshold: float


@dataclasses.dataclass(frozen=True)
class PRCurve:
    points: List[PRPoint]
    num_gt: int


@dataclasses.dataclass(frozen=True)
class EvalReport:
    """Outcome of one evaluation run."""

    curve: PRCurve
    average_precision: float
    num_images: int
    num_gt: int
    num_detections: int
    true_positives: int
    false_positives: int
    iou_min: float


def _fields(path: PathLike, lineno: int, line: str, count: int) -> List[float]:
    parts = line.split()
    if len(parts) < count:
        raise AnnotationParseError(f"{path}:{lineno}: expected {count} numeric fields, got {line!r}")
    try:
        values = [float(v) for v in parts[:count]]
    except ValueError as e:
        raise AnnotationParseError(f"{path}:{lineno}: {e}") from e
    if not all(math.isfinite(v) for v in values):
        raise AnnotationParseError(f"{path}:{lineno}: non-finite value in {line!r}")
    return values


def parse_rect_annotations(path: PathLike) -> List[GroundTruth]:
    """Reads "image-id x y w h" lines, grouped by image in first-appearance order.

    Blank lines and lines starting with # are skipped.

    Raises:
        AnnotationParseError: Naming the offending line.
    """
    grouped: Dict[str, GroundTruth] = {}
    with open(path, "r") as stream:
        for lineno, line in enumerate(stream, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise AnnotationParseError(f"{path}:{lineno}: expected 'image-id x y w h', got {line!r}")
            image_id = parts[0]
            box = Box(*_fields(path, lineno, " ".join(parts[1:]), 4))
            if box.w <= 0 or box.h <= 0:
                raise AnnotationParseError(f"{path}:{lineno}: box {tuple(box)} must have positive size")
            grouped.setdefault(image_id, GroundTruth(image_id)).boxes.append(box)
    return list(grouped.values())


def ellipse_to_box(major: float, minor: float, angle: float, cx: float, cy: float) -> Box:
    """Tight axis-aligned rectangle of an ellipse whose major axis is vertical at angle 0."""
    sin2, cos2 = math.sin(angle) ** 2, math.cos(angle) ** 2
    half_w = math.sqrt(major * major * sin2 + minor * minor * cos2)
    half_h = math.sqrt(major * major * cos2 + minor * minor * sin2)
    return Box(cx - half_w, cy - half_h, 2.0 * half_w, 2.0 * half_h)


def parse_fddb_ellipses(path: PathLike) -> List[GroundTruth]:
    """Reads an FDDB fold: image path, face count, then one ellipse per line.

    Ellipse lines are "major_radius minor_radius angle cx cy [1]" with the
    angle in radians.

    Raises:
        AnnotationParseError: On a bad count, a missing ellipse line or a bad
            number, naming the image.
    """
    with open(path, "r") as stream:
        lines = [(n, line.strip()) for n, line in enumerate(stream, start=1) if line.strip()]
    truths: Dict[str, GroundTruth] = {}
    pos = 0
    while pos < len(lines):
        _, image_id = lines[pos]
        if pos + 1 >= len(lines):
            raise AnnotationParseError(f"{path}: {image_id}: missing face count")
        lineno, count_text = lines[pos + 1]
        try:
            count = int(count_text)
        except ValueError as e:
            raise AnnotationParseError(f"{path}:{lineno}: {image_id}: bad face count {count_text!r}") from e
        if count < 0:
            raise AnnotationParseError(f"{path}:{lineno}: {image_id}: negative face count")
        ellipses = lines[pos + 2 : pos + 2 + count]
        if len(ellipses) != count:
            raise AnnotationParseError(f"{path}: {image_id}: expected {count} ellipses, found {len(ellipses)}")
        gt = truths.setdefault(image_id, GroundTruth(image_id))
        for ellipse_line, text in ellipses:
            gt.boxes.append(ellipse_to_box(*_fields(path, ellipse_line, text, 5)))
        pos += 2 + count
    return list(truths.values())


def parse_annotations(path: PathLike, fmt: str = "rect") -> List[GroundTruth]:
    if fmt == "rect":
        return parse_rect_annotations(path)
    if fmt == "fddb":
        return parse_fddb_ellipses(path)
    raise InvalidArgumentError(f"unknown annotation format {fmt!r}, use one of {FORMATS}")


def read_detections(path: PathLike) -> Dict[str, List[Detection]]:
    """Reads detection JSON lines, grouped by image id in file order.

    Raises:
        AnnotationParseError: Naming the offending line.
    """
    grouped: Dict[str, List[Detection]] = {}
    with open(path, "r") as stream:
        for lineno, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                grouped.setdefault(str(record["image_id"]), []).append(from_record(record))
            except (ValueError, KeyError, TypeError) as e:
                raise AnnotationParseError(f"{path}:{lineno}: bad detection record: {e}") from e
    return grouped


def match_detections(
    dets: Sequence[Detection], gts: Sequence[Box], iou_min: float = DEFAULT_IOU, image_id: str = ""
) -> List[LabeledDetection]:
    """Greedy matching of one image's detections to its ground truth.

    Detections are visited by descending score, ties by input index. Each one
    takes the unmatched box it overlaps most (lowest index on ties) if that
    IOU is >= iou_min and is a true positive; otherwise it is a false positive.

    Returns:
        Labeled detections in visiting order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(gts)
    labeled = []
    for i in order:
        best, best_iou = None, -1.0
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            overlap = iou(dets[i].box, gt)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best is not None and best_iou >= iou_min:
            matched[best] = True
            labeled.append(LabeledDetection(dets[i], True, best, image_id))
        else:
            labeled.append(LabeledDetection(dets[i], False, None, image_id))
    return labeled


def pr_curve(labeled: Sequence[LabeledDetection], num_gt: int) -> PRCurve:
    """Cumulative precision and recall at every distinct score threshold.

    Detections sharing a score enter together, so the curve does not depend
    on how ties are ordered.

    Raises:
        InvalidArgumentError: If num_gt < 1.
    """
    if num_gt < 1:
        raise InvalidArgumentError(f"num_gt must be >= 1, got {num_gt}")
    ranked = sorted(labeled, key=lambda d: -d.detection.score)
    points = []
    tp = fp = 0
    for i, item in enumerate(ranked):
        if item.true_positive:
            tp += 1
        else:
            fp += 1
        if i + 1 < len(ranked) and ranked[i + 1].detection.score == item.detection.score:
            continue
        points.append(PRPoint(tp / num_gt, tp / (tp + fp), float(item.detection.score)))
    return PRCurve(points, num_gt)


def average_precision(curve: PRCurve) -> float:
    """All-points AP: sum of recall steps times the precision upper envelope.

    An empty curve has AP 0.
    """
    if not curve.points:
        return 0.0
    recall = np.array([p.recall for p in curve.points])
    precision = np.array([p.precision for p in curve.points])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def evaluate_detections(
    dets: Dict[str, Sequence[Detection]], truths: Sequence[GroundTruth], iou_min: float = DEFAULT_IOU
) -> EvalReport:
    """Matches every image, pools the verdicts and builds the report.

    Raises:
        EvaluationInputError: If there is no ground-truth box at all.
    """
    num_gt = sum(len(gt.boxes) for gt in truths)
    if num_gt == 0:
        raise EvaluationInputError("ground truth contains no boxes")
    by_id = {gt.image_id: gt.boxes for gt in truths}
    unknown = sorted(set(dets) - set(by_id))
    if unknown:
        logger.warning("detections for %d images without ground truth, first=%s", len(unknown), unknown[0])
    silent = sum(1 for image_id in by_id if image_id not in dets)
    if silent:
        logger.warning("%d annotated images have no detections", silent)
    labeled = []
    for image_id in list(by_id) + unknown:
        labeled += match_detections(dets.get(image_id, []), by_id.get(image_id, []), iou_min, image_id)
    curve = pr_curve(labeled, num_gt)
    tp = sum(1 for d in labeled if d.true_positive)
    return EvalReport(
        curve=curve,
        average_precision=average_precision(curve),
        num_images=len(by_id),
        num_gt=num_gt,
        num_detections=len(labeled),
        true_positives=tp,
        false_positives=len(labeled) - tp,
        iou_min=iou_min,
    )


def evaluate(det_path: PathLike, gt_path: PathLike, fmt: str = "rect", iou_min: float = DEFAULT_IOU) -> EvalReport:
    """Evaluates a detection JSON-lines file against a ground-truth file.

    Arguments:
        det_path: Detections as written by the detector.
        gt_path: Ground truth in rect or fddb form.
        fmt: "rect" or "fddb".
        iou_min: Match threshold.

    Raises:
        EvaluationInputError: If a file is missing or the ground truth is empty.
        AnnotationParseError: On malformed input.

    Returns:
        The report.
    """
    for path in (det_path, gt_path):
        if not pathlib.Path(path).is_file():
            raise EvaluationInputError(f"{path}: no such file")
    report = evaluate_detections(read_detections(det_path), parse_annotations(gt_path, fmt), iou_min)
    logger.info("evaluate dets=%d gt=%d ap=%.6f", report.num_detections, report.num_gt, report.average_precision)
    return report


def write_pr_csv(curve: PRCurve, path: PathLike) -> None:
    """CSV with header threshold,recall,precision, one row per curve point."""
    with open(path, "w", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["threshold", "recall", "precision"])
        for point in curve.points:
            writer.writerow([f"{point.threshold:.10g}", f"{point.recall:.10g}", f"{point.precision:.10g}"])


def format_report(report: EvalReport) -> str:
    """The summary as key: value lines."""
    final = report.curve.points[-1] if report.curve.points else PRPoint(0.0, 0.0, 0.0)
    rows = [
        ("average_precision", f"{report.average_precision:.6f}"),
        ("iou_min", f"{report.iou_min:g}"),
        ("images", str(report.num_images)),
        ("ground_truth", str(report.num_gt)),
        ("detections", str(report.num_detections)),
        ("true_positives", str(report.true_positives)),
        ("false_positives", str(report.false_positives)),
        ("max_recall", f"{final.recall:.6f}"),
    ]
    return "".join(f"{key}: {value}\n" for key, value in rows)

"""Overlap measures and the two non-maximum suppression strategies.

NMS-max keeps the best window and discards everything overlapping it by more
than the threshold. NMS-avg drops low-confidence windows, groups the rest into
connected components of the overlap >= threshold graph, and replaces each
group by the mean box of its members scoring at least keep_ratio of the group
maximum, scored with that maximum.
"""
import dataclasses
import enum
from typing import List, Optional, Sequence

import numpy as np

from densedet.common.errors import InvalidArgumentError
from densedet.common.utils import Box


class Strategy(str, enum.Enum):
    MAX = "max"
    AVG = "avg"


DEFAULT_OVERLAP = {Strategy.MAX: 0.3, Strategy.AVG: 0.2}


@dataclasses.dataclass(frozen=True)
class OverlapConfig:
    """Suppression parameters.

    Attributes:
        strategy: max or avg.
        overlap_threshold: IOU threshold; defaults to 0.3 for max, 0.2 for avg.
        confidence_floor: avg only, detections below it are dropped first.
        keep_ratio: avg only, fraction of the cluster maximum a member needs.
    """

    strategy: Strategy = Strategy.AVG
    overlap_threshold: Optional[float] = None
    confidence_floor: float = 0.2
    keep_ratio: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.overlap_threshold is None:
            object.__setattr__(self, "overlap_threshold", DEFAULT_OVERLAP[self.strategy])
        for name in ("overlap_threshold", "confidence_floor", "keep_ratio"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1], got {value}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    ih = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_one_to_many(box: Box, boxes: np.ndarray) -> np.ndarray:
    """IOU of box against every row (x, y, w, h) of boxes, same arithmetic as iou()."""
    if len(boxes) == 0:
        return np.zeros(0)
    x, y, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    iw = np.maximum(0.0, np.minimum(box.x + box.w, x + w) - np.maximum(box.x, x))
    ih = np.maximum(0.0, np.minimum(box.y + box.h, y + h) - np.maximum(box.y, y))
    inter = iw * ih
    union = box.w * box.h + w * h - inter
    out = np.zeros(len(boxes))
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def _as_array(dets: Sequence) -> np.ndarray:
    return np.array([tuple(d.box) for d in dets], dtype=np.float64).reshape(-1, 4)


def _score_order(dets: Sequence) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def nms_max(dets: Sequence, overlap: float) -> List:
    """Greedy suppression keeping the best-scoring windows.

    Arguments:
        dets: Detections (anything with .box and .score).
        overlap: Windows with IOU strictly above this against a kept one go.

    Returns:
        The kept detections, unchanged, best score first (ties by input order).
    """
    boxes = _as_array(dets)
    order = _score_order(dets)
    keep = []
    while order:
        best = order[0]
        keep.append(dets[best])
        rest = np.asarray(order[1:], dtype=np.intp)
        overlaps = iou_one_to_many(Box(*boxes[best]), boxes[rest])
        order = [int(i) for i in rest[overlaps <= overlap]]
    return keep


class _DisjointSet:
    def __init__(self, size: int):
        self.parent = list(range(size))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def cluster_by_overlap(dets: Sequence, overlap: float) -> List[List]:
    """Connected components of the graph linking detections with IOU >= overlap.

    Returns:
        Clusters ordered by their smallest member index, members in input order.
    """
    boxes = _as_array(dets)
    groups = _DisjointSet(len(dets))
    for i in range(len(dets) - 1):
        linked = np.nonzero(iou_one_to_many(Box(*boxes[i]), boxes[i + 1 :]) >= overlap)[0]
        for j in linked:
            groups.union(i, i + 1 + int(j))
    clusters = {}
    for i in range(len(dets)):
        clusters.setdefault(groups.find(i), []).append(dets[i])
    return [clusters[root] for root in sorted(clusters)]


def nms_avg(dets: Sequence, cfg: OverlapConfig) -> List:
    """Cluster-averaging suppression.

    Arguments:
        dets: Detections.
        cfg: Parameters; its strategy is not consulted.

    Returns:
        One detection per cluster, best score first.
    """
    confident = [dets[i] for i in _score_order(dets) if dets[i].score >= cfg.confidence_floor]
    merged = []
    for cluster in cluster_by_overlap(confident, cfg.overlap_threshold):
        best = max(cluster, key=lambda d: d.score)
        cutoff = cfg.keep_ratio * best.score
        members = _as_array([d for d in cluster if d.score >= cutoff])
        mean_box = Box(*(float(v) for v in members.mean(axis=0)))
        merged.append(dataclasses.replace(best, box=mean_box, features=None))
    return sorted(merged, key=lambda d: -d.score)


def suppress(dets: Sequence, cfg: OverlapConfig) -> List:
    """Dispatches to the configured strategy."""
    if cfg.strategy == Strategy.MAX:
        return nms_max(dets, cfg.overlap_threshold)
    return nms_avg(dets, cfg)

"""Bounding-box regression: delta encoding, ridge training and application."""
import dataclasses
import logging
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from densedet.common.errors import Error, InvalidArgumentError
from densedet.common.utils import Box
from densedet.detector.nms import iou

logger = logging.getLogger(__name__)

DEFAULT_RIDGE_LAMBDA = 1000.0
DEFAULT_PAIR_IOU = 0.6
_MAX_CONDITION = 1e12

Sample = Tuple[np.ndarray, Box, Box]


class IllConditionedError(Error):
    """The normal equations are singular or nearly so."""


class BoxDeltas(NamedTuple):
    """Proposal-relative correction towards a target box.

    Attributes:
        tx: Centre x offset in proposal widths.
        ty: Centre y offset in proposal heights.
        tw: Log width ratio.
        th: Log height ratio.
    """

    tx: float
    ty: float
    tw: float
    th: float


@dataclasses.dataclass(frozen=True, eq=False)
class RegressorModel:
    """Four linear predictors over a detection's feature vector.

    Attributes:
        weights: (4, feature_dim) array, rows ordered tx, ty, tw, th.
        biases: (4,) array.
        ridge_lambda: Regulariser the model was trained with.
    """

    weights: np.ndarray
    biases: np.ndarray
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA

    @property
    def feature_dim(self) -> int:
        return int(self.weights.shape[1])

    def predict(self, features: np.ndarray) -> BoxDeltas:
        return BoxDeltas(*(self.weights @ np.asarray(features, dtype=np.float64) + self.biases))


def _require_positive(box: Box, name: str) -> None:
    if box.w <= 0 or box.h <= 0:
        raise InvalidArgumentError(f"{name} must have positive size, got {box}")


def encode_targets(proposal: Box, gt: Box) -> BoxDeltas:
    """Deltas that move proposal onto gt.

    Raises:
        InvalidArgumentError: If either box has a non-positive side.
    """
    _require_positive(proposal, "proposal")
    _require_positive(gt, "ground truth")
    pcx, pcy = proposal.center
    gcx, gcy = gt.center
    return BoxDeltas(
        (gcx - pcx) / proposal.w,
        (gcy - pcy) / proposal.h,
        float(np.log(gt.w / proposal.w)),
        float(np.log(gt.h / proposal.h)),
    )


def decode(proposal: Box, deltas: BoxDeltas) -> Box:
    """Applies deltas to a proposal; the inverse of encode_targets."""
    _require_positive(proposal, "proposal")
    pcx, pcy = proposal.center
    cx = pcx + deltas.tx * proposal.w
    cy = pcy + deltas.ty * proposal.h
    w = proposal.w * float(np.exp(deltas.tw))
    h = proposal.h * float(np.exp(deltas.th))
    return Box(cx - w / 2.0, cy - h / 2.0, w, h)


def build_regression_pairs(dets: Sequence, gts: Sequence[Box], iou_min: float = DEFAULT_PAIR_IOU) -> List[Sample]:
    """Pairs every detection carrying features with its best ground truth.

    Only pairs with IOU >= iou_min are kept.
    """
    samples = []
    for det in dets:
        if det.features is None or not gts:
            continue
        overlaps = [iou(det.box, gt) for gt in gts]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_min:
            samples.append((det.features, det.box, gts[best]))
    return samples


def train_regressor(samples: Sequence[Sample], ridge_lambda: float = DEFAULT_RIDGE_LAMBDA) -> RegressorModel:
    """Fits the four delta predictors by ridge regression.

    Solves (X'X + lambda I') w = X' t for each delta, where X carries an
    unregularised bias column.

    Arguments:
        samples: (features, proposal, gt) triples, pre-filtered by overlap.
        ridge_lambda: Regulariser, >= 0.

    Raises:
        InvalidArgumentError: On no samples, mixed feature sizes or lambda < 0.
        IllConditionedError: If lambda is 0 and the system is singular.

    Returns:
        The trained model.
    """
    if not samples:
        raise InvalidArgumentError("regressor training needs at least one sample")
    if ridge_lambda < 0:
        raise InvalidArgumentError(f"ridge_lambda must be >= 0, got {ridge_lambda}")
    dims = {np.asarray(f).size for f, _, _ in samples}
    if len(dims) != 1:
        raise InvalidArgumentError(f"feature vectors have mixed sizes {sorted(dims)}")
    dim = dims.pop()
    x = np.stack([np.asarray(f, dtype=np.float64).ravel() for f, _, _ in samples])
    x = np.hstack([x, np.ones((len(samples), 1))])
    targets = np.array([encode_targets(p, g) for _, p, g in samples], dtype=np.float64)
    penalty = np.full(dim + 1, float(ridge_lambda))
    penalty[-1] = 0.0
    normal = x.T @ x + np.diag(penalty)
    if ridge_lambda == 0 and np.linalg.cond(normal) > _MAX_CONDITION:
        raise IllConditionedError("normal equations are singular; train with ridge_lambda > 0")
    try:
        solution = np.linalg.solve(normal, x.T @ targets)
    except np.linalg.LinAlgError as e:
        raise IllConditionedError(f"normal equations are singular: {e}; train with ridge_lambda > 0") from e
    logger.info("trained box regressor samples=%d dim=%d lambda=%g", len(samples), dim, ridge_lambda)
    return RegressorModel(solution[:-1].T.copy(), solution[-1].copy(), float(ridge_lambda))


def apply_regressor(model: RegressorModel, dets: Sequence) -> List:
    """Moves every detection by its predicted deltas; scores are untouched.

    Raises:
        InvalidArgumentError: If a detection has no features or the wrong size.
    """
    refined = []
    for det in dets:
        if det.features is None or np.asarray(det.features).size != model.feature_dim:
            size = None if det.features is None else np.asarray(det.features).size
            raise InvalidArgumentError(f"detection features of size {size} do not match regressor dim {model.feature_dim}")
        refined.append(dataclasses.replace(det, box=decode(det.box, model.predict(np.ravel(det.features)))))
    return refined

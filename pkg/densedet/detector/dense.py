"""Dense scanning of an image pyramid with a fully convolutional network."""
import concurrent.futures
import dataclasses
import logging
from typing import List, Optional, Tuple

import numpy as np

from densedet.common.errors import ConfigurationError, ImageTooSmallError, InvalidArgumentError
from densedet.common.utils import Box
from densedet.detector.detection import Detection
from densedet.detector.nms import OverlapConfig, suppress
from densedet.detector.regressor import RegressorModel, apply_regressor
from densedet.imaging.image import Image
from densedet.imaging.pyramid import PyramidConfig, PyramidLevel, build_pyramid
from densedet.nnet.layers import LayerKind
from densedet.nnet.network import FACE_CLASS, NetworkSpec, ScanGeometry, fc_to_conv, forward_batch, receptive_geometry

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class DetectConfig:
    """Detector parameters.

    Attributes:
        pyramid: Pyramid parameters; min_dim is replaced by the network window.
        score_floor: Cells below this never become detections.
        nms: Suppression parameters.
        threads: Pyramid levels evaluated concurrently.
    """

    pyramid: PyramidConfig = PyramidConfig()
    score_floor: float = 0.01
    nms: OverlapConfig = OverlapConfig()
    threads: int = 1

    def __post_init__(self):
        if not 0.0 <= self.score_floor <= 1.0:
            raise InvalidArgumentError(f"score_floor must lie in [0, 1], got {self.score_floor}")
        if self.threads < 1:
            raise InvalidArgumentError(f"threads must be >= 1, got {self.threads}")


@dataclasses.dataclass(frozen=True, eq=False)
class HeatMap:
    """Face probabilities of every window position on one pyramid level.

    Attributes:
        scores: (rows, cols) array in [0, 1].
        geometry: Window and stride of the cells.
        level_scale: Scale of the level relative to the original image.
        original_shape: (height, width) of the original image.
        level_index: Position of the level in its pyramid.
        features: (channels, h, w) map the regressor reads, if kept.
        feature_kernel: Side of the feature patch behind one cell.
        feature_stride: Feature-map step between neighbouring cells.
    """

    scores: np.ndarray
    geometry: ScanGeometry
    level_scale: float
    original_shape: Tuple[int, int]
    level_index: int = 0
    features: Optional[np.ndarray] = None
    feature_kernel: int = 0
    feature_stride: int = 1

    def cell_features(self, row: int, col: int) -> Optional[np.ndarray]:
        if self.features is None:
            return None
        top, left = row * self.feature_stride, col * self.feature_stride
        return self.features[:, top : top + self.feature_kernel, left : left + self.feature_kernel].ravel()


def _feature_layer(net: NetworkSpec) -> int:
    """Index of the layer whose input feeds the regressor.

    That is the first convolution converted from a fully-connected layer, or
    the last convolution of a natively convolutional network.
    """
    convs = [i for i, layer in enumerate(net.layers) if layer.kind == LayerKind.CONVOLUTION]
    converted = [i for i in convs if net.layers[i].from_fc]
    return converted[0] if converted else convs[-1]


def heatmap(
    net: NetworkSpec,
    level: PyramidLevel,
    original_shape: Optional[Tuple[int, int]] = None,
    level_index: int = 0,
    keep_features: bool = False,
) -> HeatMap:
    """Scores every window of a pyramid level in one forward pass.

    Arguments:
        net: A fully convolutional network.
        level: The pyramid level.
        original_shape: (height, width) of the unscaled image; defaults to the
            level size divided by its scale.
        level_index: Index recorded on the heat-map.
        keep_features: Whether to keep the regressor's feature map.

    Raises:
        ConfigurationError: If the network still has fully-connected layers.
        ImageTooSmallError: If the level is smaller than the window; callers
            drop such levels.

    Returns:
        The heat-map.
    """
    if net.has_fc:
        raise ConfigurationError("heat-maps need a fully convolutional network, run fc_to_conv first")
    geometry = receptive_geometry(net)
    img = level.image.with_channels(net.input_channels)
    if min(img.height, img.width) < geometry.window:
        raise ImageTooSmallError(f"level {level_index} is {img.height}x{img.width}", geometry.window)
    if original_shape is None:
        original_shape = (img.height / level.scale, img.width / level.scale)
    features, kernel, stride = None, 0, 1
    if keep_features:
        out, activations = forward_batch(net, img.data[None], keep=True)
        index = _feature_layer(net)
        features = activations[index][0]
        kernel, stride = net.layers[index].kernel, net.layers[index].stride
    else:
        out = forward_batch(net, img.data[None])
    scores = np.clip(out[0, FACE_CLASS], 0.0, 1.0)
    return HeatMap(scores, geometry, level.scale, original_shape, level_index, features, kernel, stride)


def cells_to_boxes(hm: HeatMap, floor: float) -> List[Detection]:
    """Turns every cell scoring >= floor into an original-image detection.

    Cell (r, c) covers (c * stride, r * stride, window, window) on its level;
    dividing by the level scale gives original coordinates, which are then
    clamped to the image. Cells whose clamped box is empty are dropped.
    """
    height, width = hm.original_shape
    window, stride = hm.geometry.window, hm.geometry.stride
    dets = []
    rows, cols = np.nonzero(hm.scores >= floor)
    for r, c in zip(rows.tolist(), cols.tolist()):
        box = Box(c * stride, r * stride, window, window).scaled(1.0 / hm.level_scale).clamped(width, height)
        if box.w <= 0 or box.h <= 0:
            continue
        dets.append(Detection(box, float(hm.scores[r, c]), hm.level_index, hm.cell_features(r, c)))
    return dets


def detect_raw(
    net: NetworkSpec, img: Image, cfg: DetectConfig, regressor: Optional[RegressorModel] = None, keep_features: bool = False
) -> List[Detection]:
    """Every above-floor window over the whole pyramid, before suppression.

    Levels are evaluated on cfg.threads threads and merged in level order, so
    the result does not depend on the thread count. A regressor, if given, is
    applied here.
    """
    net = fc_to_conv(net)
    geometry = receptive_geometry(net)
    pyramid_cfg = dataclasses.replace(cfg.pyramid, min_dim=geometry.window)
    levels = build_pyramid(img, pyramid_cfg)
    want_features = keep_features or regressor is not None
    shape = (img.height, img.width)

    def scan(item):
        index, level = item
        try:
            return cells_to_boxes(heatmap(net, level, shape, index, want_features), cfg.score_floor)
        except ImageTooSmallError:
            logger.debug("skipping level %d", index)
            return []

    if cfg.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            per_level = list(pool.map(scan, enumerate(levels)))
    else:
        per_level = [scan(item) for item in enumerate(levels)]
    dets = [det for level_dets in per_level for det in level_dets]
    if regressor is not None:
        refined = [
            dataclasses.replace(d, box=d.box.clamped(img.width, img.height)) for d in apply_regressor(regressor, dets)
        ]
        dets = [d for d in refined if d.box.w > 0 and d.box.h > 0]
    logger.debug("raw detections=%d levels=%d", len(dets), len(levels))
    return dets


def detect(
    net: NetworkSpec, img: Image, cfg: DetectConfig = DetectConfig(), regressor: Optional[RegressorModel] = None
) -> List[Detection]:
    """Runs the full pipeline: pyramid, heat-maps, boxes, optional regression, suppression.

    Arguments:
        net: The classifier; fully-connected layers are converted on the fly.
        img: The image.
        cfg: Detector parameters.
        regressor: Optional box regressor, applied before suppression.

    Returns:
        Detections sorted by descending score.
    """
    raw = detect_raw(net, img, cfg, regressor)
    kept = suppress(raw, cfg.nms)
    kept = [kept[i] for i in sorted(range(len(kept)), key=lambda i: (-kept[i].score, i))]
    logger.info("detect raw=%d kept=%d", len(raw), len(kept))
    return kept


def level_heatmaps(net: NetworkSpec, img: Image, cfg: DetectConfig = DetectConfig()) -> List[HeatMap]:
    """The heat-map of every pyramid level, largest level first."""
    net = fc_to_conv(net)
    pyramid_cfg = dataclasses.replace(cfg.pyramid, min_dim=receptive_geometry(net).window)
    shape = (img.height, img.width)
    return [heatmap(net, level, shape, index) for index, level in enumerate(build_pyramid(img, pyramid_cfg))]


def render_heatmap(hm: HeatMap) -> Image:
    """Grayscale rendering, score s becomes pixel round-half-up(255 s)."""
    return Image(np.floor(255.0 * hm.scores + 0.5)[None])

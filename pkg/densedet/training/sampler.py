"""Training patches, batch composition and pose statistics.

Positives are jittered ground-truth squares whose IOU with a face exceeds
iou_min; negatives are log-uniform squares overlapping every face by at most
iou_max. Near misses are negatives drawn next to a face, overlapping it by
more than zero and at most iou_max. All draws come from numpy generators
seeded by the caller, per-image seeds are derived with
densedet.common.utils.derive_seed.
"""
import dataclasses
import enum
import logging
import math
import pathlib
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from densedet.common.errors import Error, InvalidArgumentError
from densedet.common.utils import Box, derive_seed, round_half_up
from densedet.detector.nms import iou
from densedet.imaging.codec import write_image
from densedet.imaging.image import Image
from densedet.imaging.pyramid import resize_bilinear
from densedet.nnet.zoo import MININET_WINDOW

logger = logging.getLogger(__name__)

PathLike = Union[str, pathlib.Path]

JITTER_SCALE = (0.7, 1.4)
JITTER_SHIFT = 0.5
DEFAULT_POSITIVE_IOU = 0.5
DEFAULT_NEGATIVE_IOU = 0.3
_MIN_ATTEMPTS = 1000
_ATTEMPTS_PER_PATCH = 200


class SamplingExhaustedError(Error):
    """No qualifying window was found within the attempt budget."""


class Label(enum.IntEnum):
    BACKGROUND = 0
    FACE = 1


class PatchSource(NamedTuple):
    image_id: str
    box: Box


@dataclasses.dataclass(frozen=True, eq=False)
class Patch:
    """A window-sized training example.

    Attributes:
        tensor: (channels, window, window) float32 pixels.
        label: Face or background.
        source: Image id and the integer rectangle the pixels came from.
        flipped: Whether the pixels are mirrored left to right.
    """

    tensor: np.ndarray
    label: Label
    source: PatchSource
    flipped: bool = False


@dataclasses.dataclass(frozen=True)
class BatchSpec:
    """Batch size and the exact share of positives in every batch."""

    size: int = 128
    positive_fraction: float = 0.25

    def __post_init__(self):
        if self.size < 1:
            raise InvalidArgumentError(f"batch size must be >= 1, got {self.size}")
        if not 0.0 < self.positive_fraction < 1.0:
            raise InvalidArgumentError(f"positive_fraction must lie in (0, 1), got {self.positive_fraction}")
        exact = self.size * self.positive_fraction
        if abs(exact - round(exact)) > 1e-9:
            raise InvalidArgumentError(f"size x positive_fraction must be integral, got {exact}")

    @property
    def positives(self) -> int:
        return int(round(self.size * self.positive_fraction))

    @property
    def negatives(self) -> int:
        return self.size - self.positives


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    """Per-image extraction parameters used when building training pools."""

    window: int = MININET_WINDOW
    positives_per_face: int = 8
    negatives_per_image: int = 32
    near_misses_per_face: int = 8
    positive_iou: float = DEFAULT_POSITIVE_IOU
    negative_iou: float = DEFAULT_NEGATIVE_IOU


def _crop(img: Image, box: Box, window: int) -> np.ndarray:
    x, y, w, h = (int(v) for v in box)
    crop = Image(img.data[:, y : y + h, x : x + w])
    if w == window and h == window:
        return crop.data.copy()
    return resize_bilinear(crop, window / w).data


def _budget(count: int) -> int:
    return max(_MIN_ATTEMPTS, _ATTEMPTS_PER_PATCH * count)


def is_positive_window(box: Box, gts: Sequence[Box], iou_min: float) -> bool:
    """IOU > iou_min against some face; a window identical to a face always qualifies."""
    return any(iou(box, gt) > iou_min or tuple(box) == tuple(gt) for gt in gts)


def sample_positives(
    img: Image,
    gts: Sequence[Box],
    iou_min: float = DEFAULT_POSITIVE_IOU,
    count: int = 1,
    seed: int = 0,
    window: int = MININET_WINDOW,
    image_id: str = "",
) -> List[Patch]:
    """Draws face patches around the annotated boxes.

    Proposals are squares of side s * sqrt(w * h), s uniform in [0.7, 1.4],
    centred on a uniformly chosen face shifted by up to half a side on each
    axis, snapped to integer pixels. Proposals leaving the image or failing
    is_positive_window are rejected.

    Arguments:
        img: The image.
        gts: Face boxes, at least one.
        iou_min: Acceptance threshold in (0, 1].
        count: Patches wanted.
        seed: Generator seed.
        window: Side of the returned patches.
        image_id: Recorded in every patch source.

    Raises:
        InvalidArgumentError: If there is no face or iou_min is out of range.
        SamplingExhaustedError: If the attempt budget runs out.

    Returns:
        count patches labelled face.
    """
    if not gts:
        raise InvalidArgumentError("positive sampling needs at least one face box")
    if not 0.0 < iou_min <= 1.0:
        raise InvalidArgumentError(f"iou_min must lie in (0, 1], got {iou_min}")
    rng = np.random.default_rng(seed)
    patches = []
    for _ in range(_budget(count)):
        if len(patches) == count:
            break
        gt = gts[int(rng.integers(len(gts)))]
        side = rng.uniform(*JITTER_SCALE) * math.sqrt(gt.w * gt.h)
        cx, cy = gt.center
        cx += rng.uniform(-JITTER_SHIFT, JITTER_SHIFT) * side
        cy += rng.uniform(-JITTER_SHIFT, JITTER_SHIFT) * side
        size = max(1, round_half_up(side))
        box = Box(round_half_up(cx - size / 2.0), round_half_up(cy - size / 2.0), size, size)
        if box.x < 0 or box.y < 0 or box.x + size > img.width or box.y + size > img.height:
            continue
        if is_positive_window(box, gts, iou_min):
            patches.append(Patch(_crop(img, box, window), Label.FACE, PatchSource(image_id, box)))
    if len(patches) < count:
        raise SamplingExhaustedError(f"{image_id or 'image'}: found {len(patches)} of {count} positive windows")
    return patches


def sample_negatives(
    img: Image,
    gts: Sequence[Box],
    iou_max: float = DEFAULT_NEGATIVE_IOU,
    count: int = 1,
    seed: int = 0,
    window: int = MININET_WINDOW,
    image_id: str = "",
) -> List[Patch]:
    """Draws background patches.

    Sides are log-uniform between window / 5 and the shorter image side,
    positions uniform; windows overlapping any face by more than iou_max are
    rejected.

    Raises:
        InvalidArgumentError: If iou_max is outside [0, 1).
        SamplingExhaustedError: If the attempt budget runs out.
    """
    if not 0.0 <= iou_max < 1.0:
        raise InvalidArgumentError(f"iou_max must lie in [0, 1), got {iou_max}")
    smallest = min(img.height, img.width)
    lo = min(max(2, round_half_up(window / 5.0)), smallest)
    rng = np.random.default_rng(seed)
    patches = []
    for _ in range(_budget(count)):
        if len(patches) == count:
            break
        size = min(smallest, max(1, round_half_up(math.exp(rng.uniform(math.log(lo), math.log(smallest))))))
        x = int(rng.integers(img.width - size + 1))
        y = int(rng.integers(img.height - size + 1))
        box = Box(x, y, size, size)
        if all(iou(box, gt) <= iou_max for gt in gts):
            patches.append(Patch(_crop(img, box, window), Label.BACKGROUND, PatchSource(image_id, box)))
    if len(patches) < count:
        raise SamplingExhaustedError(f"{image_id or 'image'}: found {len(patches)} of {count} negative windows")
    return patches


def sample_near_misses(
    img: Image,
    gts: Sequence[Box],
    iou_max: float = DEFAULT_NEGATIVE_IOU,
    count: int = 1,
    seed: int = 0,
    window: int = MININET_WINDOW,
    image_id: str = "",
) -> List[Patch]:
    """Draws background patches that partly overlap a face.

    Proposals are drawn like positives but shifted by up to a whole side on
    each axis. A proposal is kept when it lies inside the image and its best
    IOU with the faces is in (0, iou_max], so windows cut through faces or sit
    between neighbouring faces.

    Raises:
        InvalidArgumentError: If there is no face or iou_max is outside (0, 1).
        SamplingExhaustedError: If the attempt budget runs out.
    """
    if not gts:
        raise InvalidArgumentError("near-miss sampling needs at least one face box")
    if not 0.0 < iou_max < 1.0:
        raise InvalidArgumentError(f"iou_max must lie in (0, 1), got {iou_max}")
    rng = np.random.default_rng(seed)
    patches = []
    for _ in range(_budget(count)):
        if len(patches) == count:
            break
        gt = gts[int(rng.integers(len(gts)))]
        side = rng.uniform(*JITTER_SCALE) * math.sqrt(gt.w * gt.h)
        cx, cy = gt.center
        cx += rng.uniform(-1.0, 1.0) * side
        cy += rng.uniform(-1.0, 1.0) * side
        size = max(1, round_half_up(side))
        box = Box(round_half_up(cx - size / 2.0), round_half_up(cy - size / 2.0), size, size)
        if box.x < 0 or box.y < 0 or box.x + size > img.width or box.y + size > img.height:
            continue
        if 0.0 < max(iou(box, other) for other in gts) <= iou_max:
            patches.append(Patch(_crop(img, box, window), Label.BACKGROUND, PatchSource(image_id, box)))
    if len(patches) < count:
        raise SamplingExhaustedError(f"{image_id or 'image'}: found {len(patches)} of {count} near-miss windows")
    return patches


def flip_patch(p: Patch) -> Patch:
    """Mirrors a patch left to right; column c moves to width - 1 - c."""
    return dataclasses.replace(p, tensor=np.ascontiguousarray(p.tensor[:, :, ::-1]), flipped=not p.flipped)


def compose_batch(
    positives: Sequence[Patch],
    negatives: Sequence[Patch],
    spec: BatchSpec = BatchSpec(),
    seed: int = 0,
    flip_probability: float = 0.5,
) -> List[Patch]:
    """Draws one shuffled batch with exactly spec.positives faces.

    Members are drawn uniformly with replacement from each pool and flipped
    with flip_probability.

    Raises:
        InvalidArgumentError: If a pool is empty.
    """
    if not positives or not negatives:
        raise InvalidArgumentError(f"batch pools must be non-empty, got {len(positives)} positives, {len(negatives)} negatives")
    rng = np.random.default_rng(seed)
    picked = [positives[int(i)] for i in rng.integers(len(positives), size=spec.positives)]
    picked += [negatives[int(i)] for i in rng.integers(len(negatives), size=spec.negatives)]
    flips = rng.random(spec.size) < flip_probability
    picked = [flip_patch(p) if flip else p for p, flip in zip(picked, flips)]
    return [picked[int(i)] for i in rng.permutation(spec.size)]


def stack_batch(batch: Sequence[Patch]) -> Tuple[np.ndarray, np.ndarray]:
    """(N, C, H, W) float64 inputs and (N,) integer labels of a batch."""
    if not batch:
        raise InvalidArgumentError("empty batch")
    x = np.stack([p.tensor for p in batch]).astype(np.float64)
    labels = np.array([int(p.label) for p in batch], dtype=np.intp)
    return x, labels


def build_pools(
    items: Sequence[Tuple[str, Image, Sequence[Box]]], cfg: SamplerConfig = SamplerConfig(), seed: int = 0
) -> Tuple[List[Patch], List[Patch]]:
    """Extracts positive and negative pools from annotated images.

    Image i samples with derive_seed(seed, i), so the pools do not depend on
    how the images are split across workers. Images that exhaust their budget
    are skipped with a warning. Each face adds near_misses_per_face near misses
    to the negatives.
    """
    positives, negatives = [], []
    for index, (image_id, img, gts) in enumerate(items):
        image_seed = derive_seed(seed, index)
        try:
            faces = []
            if gts:
                faces = sample_positives(
                    img, gts, cfg.positive_iou, cfg.positives_per_face * len(gts), image_seed, cfg.window, image_id
                )
            background = sample_negatives(
                img, gts, cfg.negative_iou, cfg.negatives_per_image, image_seed + 1, cfg.window, image_id
            )
            if gts and cfg.near_misses_per_face:
                wanted = cfg.near_misses_per_face * len(gts)
                background += sample_near_misses(
                    img, gts, cfg.negative_iou, wanted, image_seed + 2, cfg.window, image_id
                )
        except SamplingExhaustedError as e:
            logger.warning("skipping image=%s: %s", image_id, e)
            continue
        positives += faces
        negatives += background
    logger.info("pools images=%d positives=%d negatives=%d", len(items), len(positives), len(negatives))
    return positives, negatives


def write_patches(patches: Sequence[Patch], directory: PathLike, index_name: str = "index.tsv") -> pathlib.Path:
    """Dumps patches as PGM files plus a tab separated index.

    Index columns: file, label, image_id, x, y, w, h, flipped.

    Returns:
        The index path.
    """
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, p in enumerate(patches):
        name = f"patch_{i:06d}.pgm"
        write_image(Image(p.tensor).with_channels(1), directory / name)
        box = p.source.box
        rows.append(
            "\t".join(
                [name, p.label.name.lower(), p.source.image_id]
                + [f"{v:g}" for v in box]
                + [str(int(p.flipped))]
            )
        )
    index = directory / index_name
    index.write_text("".join(row + "\n" for row in rows))
    return index


class PoseAnnotation(NamedTuple):
    """Head rotation in degrees."""

    roll: float
    pitch: float
    yaw: float
    image_id: str = ""


class PoseHistograms(NamedTuple):
    edges: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray
    yaw: np.ndarray


def parse_pose_file(path: PathLike) -> List[PoseAnnotation]:
    """Reads "image-id roll pitch yaw" lines; blank lines and # comments are skipped.

    Commas are accepted as separators too.

    Raises:
        InvalidArgumentError: On a malformed or non-finite line, naming it.
    """
    annos = []
    with open(path, "r") as stream:
        for lineno, line in enumerate(stream, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.replace(",", " ").split()
            if len(fields) != 4:
                raise InvalidArgumentError(f"{path}:{lineno}: expected 'id roll pitch yaw', got {line!r}")
            try:
                angles = [float(v) for v in fields[1:]]
            except ValueError as e:
                raise InvalidArgumentError(f"{path}:{lineno}: {e}") from e
            if not all(math.isfinite(a) for a in angles):
                raise InvalidArgumentError(f"{path}:{lineno}: angles must be finite")
            annos.append(PoseAnnotation(*angles, image_id=fields[0]))
    return annos


def _bin_count(bin_width: float) -> int:
    if bin_width <= 0:
        raise InvalidArgumentError(f"bin_width must be positive, got {bin_width}")
    return int(math.ceil(360.0 / bin_width - 1e-9))


def _bin_index(angles: np.ndarray, bin_width: float, bins: int) -> np.ndarray:
    wrapped = np.mod(np.asarray(angles, dtype=np.float64) + 180.0, 360.0)
    return np.minimum((wrapped // bin_width).astype(np.intp), bins - 1)


def pose_histogram(annos: Sequence[PoseAnnotation], bin_width: float = 10.0) -> PoseHistograms:
    """Counts annotations per angle bin; bins tile [-180, 180), angles wrap.

    Raises:
        InvalidArgumentError: If bin_width <= 0.
    """
    bins = _bin_count(bin_width)
    edges = -180.0 + bin_width * np.arange(bins + 1, dtype=np.float64)
    edges[-1] = 180.0
    counts = []
    for axis in ("roll", "pitch", "yaw"):
        angles = np.array([getattr(a, axis) for a in annos], dtype=np.float64)
        counts.append(np.bincount(_bin_index(angles, bin_width, bins), minlength=bins))
    return PoseHistograms(edges, *counts)


def pose_score_profile(
    annos: Sequence[PoseAnnotation], scores: Sequence[float], bin_width: float = 10.0
) -> Dict[str, np.ndarray]:
    """Mean detector score per angle bin, nan where a bin is empty.

    Arguments:
        annos: Pose annotations.
        scores: One score per annotation, in the same order.
        bin_width: Bin width in degrees.

    Returns:
        {"roll": ..., "pitch": ..., "yaw": ...} arrays of bin means.
    """
    if len(annos) != len(scores):
        raise InvalidArgumentError(f"{len(annos)} annotations but {len(scores)} scores")
    bins = _bin_count(bin_width)
    weights = np.asarray(scores, dtype=np.float64)
    profile = {}
    for axis in ("roll", "pitch", "yaw"):
        index = _bin_index(np.array([getattr(a, axis) for a in annos], dtype=np.float64), bin_width, bins)
        totals = np.bincount(index, weights=weights, minlength=bins)
        counts = np.bincount(index, minlength=bins)
        means = np.full(bins, np.nan)
        np.divide(totals, counts, out=means, where=counts > 0)
        profile[axis] = means
    return profile


def format_histograms(hist: PoseHistograms, profile: Optional[Dict[str, np.ndarray]] = None) -> str:
    """Tab separated table: bin_start, bin_end, counts per axis and optional mean scores."""
    header = ["bin_start", "bin_end", "roll", "pitch", "yaw"]
    if profile is not None:
        header += ["roll_score", "pitch_score", "yaw_score"]
    lines = ["\t".join(header)]
    for i in range(len(hist.roll)):
        row = [f"{hist.edges[i]:g}", f"{hist.edges[i + 1]:g}"]
        row += [str(int(hist.roll[i])), str(int(hist.pitch[i])), str(int(hist.yaw[i]))]
        if profile is not None:
            row += ["nan" if np.isnan(profile[a][i]) else f"{profile[a][i]:.6f}" for a in ("roll", "pitch", "yaw")]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"

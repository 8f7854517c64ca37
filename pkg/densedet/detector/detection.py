"""The detection record shared by the detector, suppression and regression."""
import dataclasses
import json
from typing import Dict, Optional

import numpy as np

from densedet.common.utils import Box


@dataclasses.dataclass(frozen=True)
class Detection:
    """A scored box in original-image pixel coordinates.

    Attributes:
        box: The rectangle.
        score: Face probability in [0, 1].
        level_index: Pyramid level the window came from.
        features: Feature vector of the window, when the detector kept it.
    """

    box: Box
    score: float
    level_index: int = 0
    features: Optional[np.ndarray] = dataclasses.field(default=None, compare=False, repr=False)

    def to_record(self, image_id: str) -> Dict:
        return {
            "image_id": image_id,
            "x": float(self.box.x),
            "y": float(self.box.y),
            "width": float(self.box.w),
            "height": float(self.box.h),
            "score": float(self.score),
        }


def to_json_line(det: Detection, image_id: str) -> str:
    """One detection as a JSON-lines record: image_id, x, y, width, height, score."""
    return json.dumps(det.to_record(image_id))


def from_record(record: Dict) -> Detection:
    box = Box(float(record["x"]), float(record["y"]), float(record["width"]), float(record["height"]))
    return Detection(box, float(record["score"]))

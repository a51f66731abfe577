"""Binary mask -> text instances (8-connected components)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import DegenerateInputError, ShapeError

DEFAULT_MIN_AREA = 20
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class TextInstance:
    """One text region on the full canvas.

    ``bbox`` is (x0, y0, x1, y1), inclusive-exclusive and tight around ``mask``.
    ``score`` is the mean probability over the mask for detections, 1.0 for
    ground truth.
    """

    mask: np.ndarray
    bbox: tuple[int, int, int, int]
    area: int
    score: float = 1.0

    @classmethod
    def from_mask(cls, mask: np.ndarray, score: float = 1.0) -> "TextInstance":
        mask = np.asarray(mask, dtype=bool)
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            raise DegenerateInputError("text instance with an empty mask")
        bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        return cls(mask=mask, bbox=bbox, area=int(ys.size), score=float(score))


def extract_instances(bm: np.ndarray, prob: np.ndarray, min_area: int = DEFAULT_MIN_AREA) -> list[TextInstance]:
    bm = np.asarray(bm, dtype=bool)
    prob = np.asarray(prob, dtype=np.float64)
    if bm.shape != prob.shape:
        raise ShapeError(f"binary mask {bm.shape} and probability map {prob.shape} differ")
    if min_area < 1:
        raise ValueError(f"min_area must be >= 1, got {min_area}")
    labels, n = ndimage.label(bm, structure=_EIGHT)
    if n == 0:
        return []
    index = np.arange(1, n + 1)
    areas = ndimage.sum_labels(bm, labels, index)
    means = ndimage.mean(prob, labels, index)
    out = []
    for lab, sl, area, score in zip(index, ndimage.find_objects(labels), areas, means):
        if area < min_area:
            continue
        mask = np.zeros(bm.shape, dtype=bool)
        mask[sl] = labels[sl] == lab
        ys, xs = sl
        out.append(TextInstance(mask, (xs.start, ys.start, xs.stop, ys.stop), int(area), float(score)))
    out.sort(key=lambda inst: -inst.score)
    return out


def instances_from_labels(labels: np.ndarray) -> list[TextInstance]:
    """Ground-truth instances from an instance label map (0 = background)."""
    return [TextInstance.from_mask(labels == i) for i in range(1, int(labels.max(initial=0)) + 1)
            if np.any(labels == i)]


def mask_to_canvas(mask: np.ndarray, bbox: tuple[int, int, int, int], canvas: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour scale ``mask`` into ``bbox`` on an all-zero canvas (H, W)."""
    x0, y0, x1, y1 = bbox
    H, W = canvas
    bw, bh = x1 - x0, y1 - y0
    if bw <= 0 or bh <= 0:
        raise DegenerateInputError(f"degenerate bbox {bbox}")
    if x0 < 0 or y0 < 0 or x1 > W or y1 > H:
        raise ShapeError(f"bbox {bbox} outside canvas {canvas}")
    mask = np.asarray(mask, dtype=bool)
    mh, mw = mask.shape
    rows = np.minimum(((np.arange(bh) + 0.5) * mh / bh).astype(int), mh - 1)
    cols = np.minimum(((np.arange(bw) + 0.5) * mw / bw).astype(int), mw - 1)
    out = np.zeros((H, W), dtype=bool)
    out[y0:y1, x0:x1] = mask[np.ix_(rows, cols)]
    return out

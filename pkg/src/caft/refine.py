"""Quadrant divide-and-merge refinement.

The filter predicts a mask on each of the four quadrant token maps; the four
masks are stitched into a double-resolution mask, which is then reduced back
to grid resolution to serve as the training target for the second-stage
filter. Clustering is never run on quadrants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .atf import AtfModel, atf_predict
from .errors import DataError
from .maskops import Mask, binarize, downsample_soft


@dataclass
class RefinedMask:
    """(2H, 2W) binary mask stitched from four quadrant predictions."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] % 2 or bits.shape[1] % 2:
            raise DataError(f"refined mask must be 2-D with even sides, got {bits.shape}")
        self.bits = bits.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


def stitch_masks(quadrant_masks) -> RefinedMask:
    """Places four equal masks at (top-left, top-right, bottom-left,
    bottom-right) of a double-size canvas."""
    if len(quadrant_masks) != 4:
        raise DataError(f"need exactly 4 quadrant masks, got {len(quadrant_masks)}")
    shapes = {(m.height, m.width) for m in quadrant_masks}
    if len(shapes) != 1:
        raise DataError(f"quadrant masks disagree in shape: {sorted(shapes)}")
    h, w = shapes.pop()
    canvas = np.zeros((2 * h, 2 * w), dtype=np.uint8)
    tl, tr, bl, br = (m.bits for m in quadrant_masks)
    canvas[:h, :w] = tl
    canvas[:h, w:] = tr
    canvas[h:, :w] = bl
    canvas[h:, w:] = br
    return RefinedMask(canvas)


def refine_mask(model: AtfModel, quadrants) -> RefinedMask:
    """Predicts each quadrant map and stitches the masks."""
    if len(quadrants) != 4:
        raise DataError(f"need exactly 4 quadrant maps, got {len(quadrants)}")
    shapes = {(q.height, q.width, q.dim) for q in quadrants}
    if len(shapes) != 1:
        raise DataError(f"quadrant maps disagree in shape: {sorted(shapes)}")
    return stitch_masks([atf_predict(model, q) for q in quadrants])


def refined_to_target(refined: RefinedMask, threshold: float = 0.5) -> Mask:
    """Block-mean 2x downsample then binarize: the grid-resolution training
    target for the second-stage filter."""
    soft = downsample_soft(Mask(refined.bits), 2)
    return binarize(soft, threshold)

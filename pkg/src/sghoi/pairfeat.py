"""Per-pair spatial features: two semantic masks on a shared square frame."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import ops
from .datamodel import BoundingBox, DataError, Vocabulary


@dataclass(frozen=True)
class SemanticMaskPair:
    """Human and object channels rasterized over the pair's union frame."""

    human_channel: np.ndarray
    object_channel: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.human_channel.ravel(), self.object_channel.ravel()])


def category_fill_value(category_id: int, num_categories: int) -> float:
    """Injective scalar encoding (c + 1) / (C + 1) in (0, 1]."""
    return (category_id + 1) / (num_categories + 1)


def union_frame(h_box: BoundingBox, o_box: BoundingBox) -> Tuple[float, float, float]:
    """Square frame (x0, y0, side) tightly covering both boxes, center padded."""
    x0 = min(h_box.x_tl, o_box.x_tl)
    y0 = min(h_box.y_tl, o_box.y_tl)
    x1 = max(h_box.x_br, o_box.x_br)
    y1 = max(h_box.y_br, o_box.y_br)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise DataError("degenerate union box for mask rasterization")
    side = max(w, h)
    # pad the short axis symmetrically so the union stays centered
    x0 -= (side - w) / 2
    y0 -= (side - h) / 2
    return x0, y0, side


def _rasterize(box: BoundingBox, frame, size: int, value: float) -> np.ndarray:
    """Fill cells whose centers fall inside the mapped box (closed test)."""
    x0, y0, side = frame
    centers = (np.arange(size) + 0.5) * (side / size)
    cols = (centers + x0 >= box.x_tl) & (centers + x0 <= box.x_br)
    rows = (centers + y0 >= box.y_tl) & (centers + y0 <= box.y_br)
    grid = np.zeros((size, size), dtype=np.float64)
    grid[np.ix_(rows, cols)] = value
    return grid


def build_semantic_masks(
    h_box: BoundingBox,
    o_box: BoundingBox,
    h_cat: int,
    o_cat: int,
    image_w: float,
    image_h: float,
    vocab: Vocabulary,
    size: int = 64,
) -> SemanticMaskPair:
    """Two size x size grids over the pair's padded union frame.

    Each channel holds the category fill value inside its box and zero
    elsewhere; the image dimensions do not enter the frame, which makes the
    grids translation and scale invariant.
    """
    for box in (h_box, o_box):
        if box.width <= 0 or box.height <= 0:
            raise DataError(f"zero-area box {box} cannot be rasterized")
    frame = union_frame(h_box, o_box)
    C = vocab.num_objects
    return SemanticMaskPair(
        human_channel=_rasterize(h_box, frame, size, category_fill_value(h_cat, C)),
        object_channel=_rasterize(o_box, frame, size, category_fill_value(o_cat, C)),
    )


def project_masks(masks: SemanticMaskPair, params):
    """Flatten both channels and map them to a sigmoid gate of width 2*d_f.

    The projection weight is stored input-major, shape (2*size^2, 2*d_f).
    """
    flat = masks.flat()
    return ops.sigmoid(
        ops.add(ops.matmul(flat, params["mask.proj.weight"]), params["mask.proj.bias"])
    )

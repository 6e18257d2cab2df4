"""Small grayscale image helpers (nearest-neighbour resampling, heatmaps)."""

from __future__ import annotations

import numpy as np


def resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D array to ``height x width``.

    Source index for destination pixel ``i`` is ``floor((i + 0.5) * src / dst)``,
    i.e. pixel centres are aligned.
    """
    img = np.asarray(img)
    src_h, src_w = img.shape
    rows = np.minimum(((np.arange(height) + 0.5) * src_h / height).astype(np.int64), src_h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * src_w / width).astype(np.int64), src_w - 1)
    return img[np.ix_(rows, cols)]


def vector_heatmap(values: np.ndarray, side: int, scale: float) -> np.ndarray:
    """Render a real vector as a ``side x side`` uint8 heatmap.

    The vector is cyclically tiled to ``side*side`` entries; a value of 0 maps
    to grey 128 and ``+-scale`` maps to 128 +- 96.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    tiled = np.resize(values, side * side).reshape(side, side)
    scale = scale if scale > 0 else 1.0
    pix = np.rint(128.0 + 96.0 * tiled / scale)
    return np.clip(pix, 0, 255).astype(np.uint8)

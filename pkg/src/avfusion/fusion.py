"""Sensor-, feature- and score-level fusion of voice and face."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import Embedding
from .errors import (
    DimMismatch,
    EmptyDataset,
    EmptyVector,
    InvalidConfig,
    InvalidLayout,
    NotAPosterior,
    OutOfConfiguredRange,
    UtteranceMismatch,
)
from .imaging import resize_nearest
from .nn import SoftmaxModel, TrainConfig, train_softmax

# The fusion function D = f(voice, face) is a plain softmax layer.
SoftmaxFusionModel = SoftmaxModel

MAX_ROTATION_DEG = 20.0
MAX_SHIFT_PX = 5


def fusion_train_config(seed: int = 0, epochs: int = 50) -> TrainConfig:
    """Defaults for the fusion softmax; training normally ends on the gradient criterion."""
    return TrainConfig(epochs=epochs, batch_size=32, lr_start=0.05, lr_end=0.005, momentum=0.9, seed=seed)


@dataclass
class FusionVector:
    values: np.ndarray
    provenance: tuple  # ((modality, dim), ...) in concatenation order

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.provenance = tuple((str(m), int(d)) for m, d in self.provenance)
        if not self.provenance:
            raise EmptyVector("fusion vector needs provenance")
        if sum(d for _, d in self.provenance) != self.values.size:
            raise DimMismatch("provenance dims do not add up to the vector length")

    @property
    def dim(self) -> int:
        return self.values.size

    def split(self) -> list:
        parts, start = [], 0
        for _, d in self.provenance:
            parts.append(self.values[start : start + d])
            start += d
        return parts


def concat_features(voice: Embedding, face: Embedding) -> FusionVector:
    """Voice first, face second."""
    if voice.id != face.id:
        raise UtteranceMismatch(f"{voice.id!r} vs {face.id!r}")
    if voice.dim == 0 or face.dim == 0:
        raise EmptyVector("cannot fuse an empty embedding")
    return FusionVector(
        np.concatenate([voice.values, face.values]),
        ((voice.modality, voice.dim), (face.modality, face.dim)),
    )


def _check_posterior(p, name, tol):
    if p.ndim != 1 or p.size == 0:
        raise NotAPosterior(f"{name} must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > tol:
        raise NotAPosterior(f"{name} sums to {p.sum():.6g}")


def concat_scores(pv, pf, tol: float = 1e-6) -> FusionVector:
    pv = np.asarray(pv, dtype=np.float64)
    pf = np.asarray(pf, dtype=np.float64)
    _check_posterior(pv, "voice posterior", tol)
    _check_posterior(pf, "face posterior", tol)
    if pv.size != pf.size:
        raise DimMismatch(f"posterior sizes differ: {pv.size} vs {pf.size}")
    return FusionVector(np.concatenate([pv, pf]), (("voice_score", pv.size), ("face_score", pf.size)))


def stack(vectors) -> np.ndarray:
    """Stack FusionVectors (or raw rows) into an N x D matrix, checking provenance."""
    if len(vectors) == 0:
        raise EmptyDataset("no fusion vectors")
    if isinstance(vectors, np.ndarray):
        return np.asarray(vectors, dtype=np.float64)
    first = vectors[0]
    if isinstance(first, FusionVector):
        for v in vectors:
            if v.provenance != first.provenance:
                raise DimMismatch(f"mixed fusion layouts {v.provenance} vs {first.provenance}")
        return np.stack([v.values for v in vectors])
    return np.asarray(vectors, dtype=np.float64)


# ---------------------------------------------------------------------------
# sensor level


@dataclass
class CompositeImage:
    pixels: np.ndarray  # height x width uint8
    layout: str
    face_region: tuple  # (x, y, w, h)
    voice_region: tuple

    @property
    def shape(self):
        return self.pixels.shape


def build_composite_image(face, gtg_img, layout: str = "face_left", out_w: int = 224, out_h: int = 224) -> CompositeImage:
    """Place the face and the gammatonegram image side by side (or stacked)."""
    face = np.asarray(face)
    gtg_img = np.asarray(gtg_img)
    if layout == "face_left":
        if out_w % 2 or out_w < 2 or out_h < 1:
            raise InvalidLayout("face_left needs an even output width")
        half = out_w // 2
        face_region, voice_region = (0, 0, half, out_h), (half, 0, half, out_h)
    elif layout == "face_top":
        if out_h % 2 or out_h < 2 or out_w < 1:
            raise InvalidLayout("face_top needs an even output height")
        half = out_h // 2
        face_region, voice_region = (0, 0, out_w, half), (0, half, out_w, half)
    else:
        raise InvalidLayout(f"unknown layout {layout!r}")
    pixels = np.zeros((out_h, out_w), dtype=np.uint8)
    for src, (x, y, w, h) in ((face, face_region), (gtg_img, voice_region)):
        pixels[y : y + h, x : x + w] = resize_nearest(src, h, w)
    return CompositeImage(pixels, layout, face_region, voice_region)


def augment_image(img, rotation_deg: float = 0.0, dx: int = 0, dy: int = 0) -> np.ndarray:
    """Rotate about the image centre (nearest neighbour), then translate.

    Pixels with no source are filled with 0.
    """
    if abs(rotation_deg) > MAX_ROTATION_DEG or abs(dx) > MAX_SHIFT_PX or abs(dy) > MAX_SHIFT_PX:
        raise OutOfConfiguredRange(
            f"rotation {rotation_deg} / shift ({dx}, {dy}) outside +-{MAX_ROTATION_DEG} deg, +-{MAX_SHIFT_PX} px"
        )
    img = np.asarray(img)
    h, w = img.shape
    out = img
    if rotation_deg != 0:
        theta = np.deg2rad(rotation_deg)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        rr, cc = np.mgrid[0:h, 0:w]
        y, x = rr - cy, cc - cx
        # inverse map: destination -> source
        sx = np.cos(theta) * x + np.sin(theta) * y + cx
        sy = -np.sin(theta) * x + np.cos(theta) * y + cy
        si, sj = np.rint(sy).astype(np.int64), np.rint(sx).astype(np.int64)
        valid = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
        out = np.zeros_like(img)
        out[valid] = img[si[valid], sj[valid]]
    if dx or dy:
        shifted = np.zeros_like(out)
        dst_r = slice(max(dy, 0), h + min(dy, 0))
        src_r = slice(max(-dy, 0), h + min(-dy, 0))
        dst_c = slice(max(dx, 0), w + min(dx, 0))
        src_c = slice(max(-dx, 0), w + min(-dx, 0))
        shifted[dst_r, dst_c] = out[src_r, src_c]
        out = shifted
    return out.copy() if out is img else out


def random_augment(img, rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation in [-20, 20] degrees and integer shifts in [-5, 5]."""
    rot = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)
    dx, dy = rng.integers(-MAX_SHIFT_PX, MAX_SHIFT_PX + 1, size=2)
    return augment_image(img, rot, int(dx), int(dy))


def block_mean(img, side: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    rb = (np.arange(side + 1) * h) // side
    cb = (np.arange(side + 1) * w) // side
    rows = np.add.reduceat(img, rb[:-1], axis=0)
    blocks = np.add.reduceat(rows, cb[:-1], axis=1)
    counts = np.outer(np.diff(rb), np.diff(cb))
    return blocks / counts


def sensor_fusion_features(comp, downsample: int = 16) -> np.ndarray:
    """Block-mean pixels, flattened row-major and scaled to [0, 1]."""
    if not 8 <= downsample <= 64:
        raise InvalidConfig("downsample side must lie in [8, 64]")
    pixels = comp.pixels if isinstance(comp, CompositeImage) else np.asarray(comp)
    if min(pixels.shape) < downsample:
        raise InvalidConfig("image smaller than the downsample grid")
    return (block_mean(pixels, downsample) / 255.0).ravel()


# ---------------------------------------------------------------------------
# classifier


def train_fusion(vectors, labels, cfg: TrainConfig | None = None, n_classes: int | None = None) -> SoftmaxFusionModel:
    X = stack(vectors)
    labels = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != len(labels):
        raise DimMismatch("vectors and labels differ in count")
    if len(np.unique(labels)) < 2:
        raise EmptyDataset("fusion training needs at least two classes")
    return train_softmax(X, labels, cfg or fusion_train_config(), n_classes)


def predict_fusion(model: SoftmaxFusionModel, vector):
    """Argmax class (ties toward the lowest index) and the posterior vector."""
    x = vector.values if isinstance(vector, FusionVector) else np.asarray(vector, dtype=np.float64)
    cls, post = model.predict(x)
    return (int(cls), post) if np.ndim(cls) == 0 else (cls, post)

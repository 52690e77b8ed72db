"""Domain data types and pure tensor utilities shared by every other module.

All types are immutable value objects wrapping numpy arrays; all operations
are pure functions and safe under arbitrary parallelism.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

IGNORE = 255

PROB_SUM_TOL = 1e-5


class Domain(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class Paradigm(enum.Enum):
    A = "a"  # source-only distillation
    B = "b"  # target-only distillation
    C = "c"  # source + target distillation
    D = "d"  # target-only, warm-started from C


class KLDirection(enum.Enum):
    STUDENT_FIRST = "student_first"
    TEACHER_FIRST = "teacher_first"


class Reduction(enum.Enum):
    MEAN = "mean"
    SUM = "sum"


def _require_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class ImageTensor:
    """RGB image, float in [0, 1], shape (H, W, 3)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {d.shape}")
        if d.shape[0] < 8 or d.shape[1] < 8:
            raise ValueError(f"image must be at least 8x8, got {d.shape[:2]}")
        _require_finite(d, "image")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel integer class IDs, shape (H, W); IGNORE = 255 is excluded
    from every loss and metric."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        d = np.asarray(self.data)
        if not np.issubdtype(d.dtype, np.integer):
            raise ValueError("labels must be integer")
        if d.ndim != 2:
            raise ValueError(f"labels must be (H, W), got {d.shape}")
        valid = (d == IGNORE) | ((d >= 0) & (d < self.num_classes))
        if not np.all(valid):
            bad = np.unique(d[~valid])
            raise ValueError(f"invalid label values {bad} for C={self.num_classes}")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LogitMap:
    """Pre-softmax scores, shape (H, W, C)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"logits must be (H, W, C), got {d.shape}")
        _require_finite(d, "logits")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ProbabilityMap:
    """Per-pixel class distributions, shape (H, W, C); rows sum to 1."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"probabilities must be (H, W, C), got {d.shape}")
        _require_finite(d, "probabilities")
        if d.min() < 0.0:
            raise ValueError("probabilities must be non-negative")
        sums = d.sum(axis=2)
        if np.max(np.abs(sums - 1.0)) > PROB_SUM_TOL:
            raise ValueError("per-pixel probabilities must sum to 1")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class FeatureMap:
    """Intermediate representation, shape (h, w, D)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError(f"features must be (h, w, D), got {d.shape}")
        _require_finite(d, "features")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class DomainBatch:
    """A batch of images from one domain; labels present only when allowed.

    Target-domain training batches carry no labels (the target side is
    fully unsupervised)."""

    domain: Domain
    images: tuple
    labels: tuple | None = None

    def __post_init__(self):
        images = tuple(self.images)
        if not images:
            raise ValueError("batch must contain at least one image")
        shape = images[0].shape
        for im in images:
            if im.shape != shape:
                raise ValueError("batch images must share one shape")
        labels = self.labels
        if labels is not None:
            labels = tuple(labels)
            if len(labels) != len(images):
                raise ValueError("label count must match image count")
            for lm in labels:
                if lm.shape != shape[:2]:
                    raise ValueError("label shape must match image shape")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.images)


@dataclass(frozen=True)
class DistillConfig:
    """Weights and switches for the distillation objective.

    Defaults follow the published operating point: KL at the output level
    0.1, feature level one-tenth of that, MSE 0.01, pseudo-label CE 1.0,
    target-domain scaling 1.0."""

    lambda_kl_out: float = 0.1
    lambda_kl_feat: float = 0.01
    lambda_mse: float = 0.01
    lambda_pseudo: float = 1.0
    lambda_target: float = 1.0
    paradigm: Paradigm = Paradigm.C
    kl_direction: KLDirection = KLDirection.STUDENT_FIRST
    reduction: Reduction = Reduction.MEAN

    def __post_init__(self):
        for name in ("lambda_kl_out", "lambda_kl_feat", "lambda_mse",
                     "lambda_pseudo", "lambda_target"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def softmax(logits: LogitMap) -> ProbabilityMap:
    """Numerically stabilized per-pixel softmax (max subtracted before exp)."""
    z = logits.data
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    return ProbabilityMap(e / e.sum(axis=2, keepdims=True))


def pseudo_labels(teacher_probs: ProbabilityMap) -> LabelMap:
    """Per-pixel argmax of the teacher's probabilities.

    Ties break to the lowest class index; never emits IGNORE."""
    p = teacher_probs.data
    return LabelMap(p.argmax(axis=2).astype(np.int64), num_classes=p.shape[2])


def _bilinear(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of an (H, W, C) array."""
    in_h, in_w = data.shape[:2]
    ys = np.linspace(0.0, in_h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, in_w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = data[y0][:, x0] * (1 - wx) + data[y0][:, x1] * wx
    bot = data[y1][:, x0] * (1 - wx) + data[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def bilinear_resize(map_, out_h: int, out_w: int):
    """Resize a FeatureMap or ProbabilityMap with corner-aligned bilinear
    sampling; probability maps are renormalized per pixel afterwards."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if map_.data.shape[0] == out_h and map_.data.shape[1] == out_w:
        return map_
    out = _bilinear(map_.data, out_h, out_w)
    if isinstance(map_, ProbabilityMap):
        out = out / out.sum(axis=2, keepdims=True)
        return ProbabilityMap(out)
    if isinstance(map_, FeatureMap):
        return FeatureMap(out)
    raise TypeError(f"cannot resize {type(map_).__name__}")

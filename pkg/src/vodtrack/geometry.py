"""Axis-aligned box algebra for tracking-by-regression.

Boxes are stored in corner form ``(x1, y1, x2, y2)`` in continuous pixel
units; the regression math works on the derived center form
``(cx, cy, w, h)``. Regression deltas follow the standard R-CNN
parameterization: center offsets normalized by the reference box size,
log-space scale ratios.

All types are immutable and all operations are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Box",
    "RegressionDelta",
    "JitterCoefficients",
    "RoiSamplingError",
    "iou",
    "encode",
    "decode",
    "expand",
    "jitter_roi",
    "sample_jittered_rois",
]


class RoiSamplingError(RuntimeError):
    """Raised when the jittered-RoI draw budget is exhausted before enough samples pass the overlap filter."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with corner storage and center-form accessors.

    Zero-area boxes are representable (they occur in detection files);
    negative extent is rejected at construction.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"box coordinate {name} is not finite: {v!r}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(
                f"negative box extent: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        """Build a box from center coordinates and width/height."""
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @property
    def cx(self) -> float:
        return (self.x1 + self.x2) / 2.0

    @property
    def cy(self) -> float:
        return (self.y1 + self.y2) / 2.0

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def shift(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class RegressionDelta:
    """Dimensionless box regression target/prediction.

    ``dx``/``dy`` are center offsets normalized by the reference box
    width/height; ``dw``/``dh`` are log-space size ratios.
    """

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self) -> None:
        for name in ("dx", "dy", "dw", "dh"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"regression delta {name} is not finite: {v!r}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh)


@dataclass(frozen=True)
class JitterCoefficients:
    """Uniform jitter coefficients for RoI resampling around a reference box.

    Shift components lie in [-1, 1] (in units of the reference size),
    scale components in [0.5, 1.5].
    """

    dx: float
    dy: float
    dw: float
    dh: float

    def __post_init__(self) -> None:
        if not (-1.0 <= self.dx <= 1.0 and -1.0 <= self.dy <= 1.0):
            raise ValueError(f"shift coefficients out of [-1, 1]: ({self.dx}, {self.dy})")
        if not (0.5 <= self.dw <= 1.5 and 0.5 <= self.dh <= 1.5):
            raise ValueError(f"scale coefficients out of [0.5, 1.5]: ({self.dw}, {self.dh})")


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0.0 when the union has zero area."""
    ix1 = max(a.x1, b.x1)
    iy1 = max(a.y1, b.y1)
    ix2 = min(a.x2, b.x2)
    iy2 = min(a.y2, b.y2)
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _require_positive_extent(b: Box, role: str) -> None:
    if b.w <= 0.0 or b.h <= 0.0:
        raise ValueError(f"{role} box must have positive width and height: {b}")


def encode(b: Box, g: Box) -> RegressionDelta:
    """Regression target taking reference box ``b`` onto target box ``g``.

    Returns ``((g.cx - b.cx) / b.w, (g.cy - b.cy) / b.h,
    ln(g.w / b.w), ln(g.h / b.h))``. Both boxes must have positive extent.
    """
    _require_positive_extent(b, "reference")
    _require_positive_extent(g, "target")
    return RegressionDelta(
        dx=(g.cx - b.cx) / b.w,
        dy=(g.cy - b.cy) / b.h,
        dw=math.log(g.w / b.w),
        dh=math.log(g.h / b.h),
    )


def decode(b: Box, d: RegressionDelta) -> Box:
    """Apply a regression delta to reference box ``b``.

    Inverse of :func:`encode`: the decoded box has center
    ``(d.dx * b.w + b.cx, d.dy * b.h + b.cy)`` and size
    ``(exp(d.dw) * b.w, exp(d.dh) * b.h)``.
    """
    _require_positive_extent(b, "reference")
    # Corner-form evaluation (algebraically identical to the center form)
    # keeps the zero-delta decode bit-exact: decode(b, 0) == b.
    sx = b.w * (1.0 - math.exp(d.dw)) / 2.0
    sy = b.h * (1.0 - math.exp(d.dh)) / 2.0
    tx = d.dx * b.w
    ty = d.dy * b.h
    return Box(
        b.x1 + tx + sx,
        b.y1 + ty + sy,
        b.x2 + tx - sx,
        b.y2 + ty - sy,
    )


def expand(b: Box, k: float) -> Box:
    """Scale a box about its center by factor ``k`` >= 1, keeping the aspect ratio."""
    if not (k >= 1.0):
        raise ValueError(f"expansion factor must be >= 1, got {k!r}")
    mx = (k - 1.0) * b.w / 2.0
    my = (k - 1.0) * b.h / 2.0
    return Box(b.x1 - mx, b.y1 - my, b.x2 + mx, b.y2 + my)


def jitter_roi(g: Box, d: JitterCoefficients) -> Box:
    """Shift and resize ``g`` by jitter coefficients.

    The result has center ``(d.dx * g.w + g.cx, d.dy * g.h + g.cy)`` and
    size ``(d.dw * g.w, d.dh * g.h)``.
    """
    _require_positive_extent(g, "reference")
    sx = g.w * (1.0 - d.dw) / 2.0
    sy = g.h * (1.0 - d.dh) / 2.0
    tx = d.dx * g.w
    ty = d.dy * g.h
    return Box(
        g.x1 + tx + sx,
        g.y1 + ty + sy,
        g.x2 + tx - sx,
        g.y2 + ty - sy,
    )


def sample_jittered_rois(
    g: Box,
    n_keep: int,
    rng_seed: int,
    *,
    overlap_threshold: float = 0.5,
    keep_low_overlap: bool = False,
) -> list[Box]:
    """Draw jittered RoIs around ``g`` and keep ``n_keep`` passing the overlap filter.

    A fixed budget of ``2 * n_keep`` jitters is drawn up front; the kept
    RoIs are chosen uniformly at random among the passers. By default a
    candidate passes when ``iou(R, g) >= overlap_threshold``; with
    ``keep_low_overlap=True`` the predicate flips to ``< overlap_threshold``.

    Raises:
        RoiSamplingError: fewer than ``n_keep`` candidates pass within the budget.
    """
    if n_keep < 1:
        raise ValueError(f"n_keep must be >= 1, got {n_keep}")
    _require_positive_extent(g, "reference")

    rng = np.random.default_rng(rng_seed)
    budget = 2 * n_keep
    shifts = rng.uniform(-1.0, 1.0, size=(budget, 2))
    scales = rng.uniform(0.5, 1.5, size=(budget, 2))

    passing: list[Box] = []
    for (dx, dy), (dw, dh) in zip(shifts, scales):
        roi = jitter_roi(g, JitterCoefficients(dx, dy, dw, dh))
        overlap = iou(roi, g)
        ok = overlap < overlap_threshold if keep_low_overlap else overlap >= overlap_threshold
        if ok:
            passing.append(roi)

    if len(passing) < n_keep:
        raise RoiSamplingError(
            f"only {len(passing)} of {budget} jittered RoIs passed the overlap "
            f"filter; {n_keep} required"
        )
    chosen = rng.choice(len(passing), size=n_keep, replace=False)
    return [passing[i] for i in chosen]

"""Seeded synthetic video scenarios: ground truth, degraded detections, features.

Objects follow a linear motion model with per-frame multiplicative scaling.
Detector degradation is modeled purely as score attenuation inside per-object
frame windows (appearance deteriorates, geometry persists), plus box jitter,
missed detections, false positives, and optional misclassification.

Presets cover the regimes the pipeline variants are meant to separate:
``clean`` (noiseless), ``degraded`` (slow motion, score dips, adjacent
birth), and ``fast`` (displacement above object size, so consecutive-frame
boxes never overlap).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .detections import PROVENANCE_DETECTED, Detection
from .evalio import VideoDetectionSet
from .geometry import Box
from .tensor_ops import FeaturePyramid

__all__ = [
    "ObjectSpec",
    "DetectorNoise",
    "ScenarioSpec",
    "generate",
    "render_features",
    "preset_scenario",
    "save_scenario",
    "load_scenario",
    "PRESETS",
]


@dataclass(frozen=True)
class ObjectSpec:
    """One object's class, lifetime, motion, and score-degradation windows."""

    class_id: int
    first_frame: int
    last_frame: int  # inclusive
    cx: float
    cy: float
    w: float
    h: float
    vx: float = 0.0
    vy: float = 0.0
    scale_rate: float = 1.0
    # (start, end) frame ranges (end exclusive) where the detector score is
    # multiplied by the factor in (0, 1).
    degradations: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self) -> None:
        if self.first_frame < 0 or self.last_frame < self.first_frame:
            raise ValueError("object lifetime must be a non-empty frame range")
        if self.w <= 0 or self.h <= 0 or self.scale_rate <= 0:
            raise ValueError("object size and scale rate must be positive")
        for start, end, factor in self.degradations:
            if end <= start:
                raise ValueError("degradation window must be non-empty")
            if not (0.0 < factor < 1.0):
                raise ValueError(f"degradation factor must be in (0, 1), got {factor}")
        object.__setattr__(
            self, "degradations", tuple((int(s), int(e), float(f)) for s, e, f in self.degradations)
        )

    def alive(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame

    def box_at(self, frame: int) -> Box:
        dt = frame - self.first_frame
        scale = self.scale_rate**dt
        return Box.from_center(
            self.cx + self.vx * dt, self.cy + self.vy * dt, self.w * scale, self.h * scale
        )

    def score_factor(self, frame: int) -> float:
        factor = 1.0
        for start, end, f in self.degradations:
            if start <= frame < end:
                factor *= f
        return factor


@dataclass(frozen=True)
class DetectorNoise:
    """Detector imperfection model applied on top of ground truth."""

    box_sigma: float = 0.0
    miss_prob: float = 0.0
    false_positive_rate: float = 0.0  # expected count per frame (Poisson)
    misclass_prob: float = 0.0
    fp_score_low: float = 0.05
    fp_score_high: float = 0.5

    def __post_init__(self) -> None:
        if self.box_sigma < 0:
            raise ValueError("box_sigma must be non-negative")
        for name in ("miss_prob", "misclass_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.false_positive_rate < 0:
            raise ValueError("false_positive_rate must be non-negative")
        if not (0.0 <= self.fp_score_low <= self.fp_score_high <= 1.0):
            raise ValueError("false-positive score range must be ordered within [0, 1]")


@dataclass(frozen=True)
class ScenarioSpec:
    """A complete seeded scene: geometry, degradation, and detector noise."""

    width: int
    height: int
    n_frames: int
    objects: tuple[ObjectSpec, ...]
    noise: DetectorNoise = DetectorNoise()
    seed: int = 0
    video: str = "scene"
    feature_channels: int = 8
    feature_strides: tuple[int, ...] = (8,)

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1 or self.n_frames < 1:
            raise ValueError("image size and frame count must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.feature_channels < 1 or not self.feature_strides:
            raise ValueError("feature settings must be positive/non-empty")
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "feature_strides", tuple(int(s) for s in self.feature_strides))
        for obj in self.objects:
            if obj.last_frame >= self.n_frames:
                raise ValueError(
                    f"object lifetime [{obj.first_frame}, {obj.last_frame}] exceeds "
                    f"{self.n_frames} frames"
                )

    def class_pool(self) -> list[int]:
        return sorted({o.class_id for o in self.objects})


def _repair_extent(lo: float, hi: float, min_size: float = 0.5) -> tuple[float, float]:
    if hi - lo >= min_size:
        return lo, hi
    mid = (lo + hi) / 2.0
    return mid - min_size / 2.0, mid + min_size / 2.0


def generate(spec: ScenarioSpec) -> tuple[VideoDetectionSet, VideoDetectionSet]:
    """Produce (ground truth with track ids, degraded detector output).

    Deterministic for a fixed spec; ground truth follows the motion model
    exactly and is never altered by the noise model.
    """
    rng = np.random.default_rng(spec.seed)
    pool = spec.class_pool()

    gt_records: list[Detection] = []
    det_records: list[Detection] = []
    for frame in range(spec.n_frames):
        for track_id, obj in enumerate(spec.objects):
            if not obj.alive(frame):
                continue
            box = obj.box_at(frame)
            gt_records.append(
                Detection(frame=frame, class_id=obj.class_id, score=1.0, box=box, track=track_id)
            )

            if rng.uniform() < spec.noise.miss_prob:
                continue
            jitter = rng.normal(0.0, spec.noise.box_sigma, size=4) if spec.noise.box_sigma > 0 else np.zeros(4)
            x1, x2 = _repair_extent(box.x1 + jitter[0], box.x2 + jitter[2])
            y1, y2 = _repair_extent(box.y1 + jitter[1], box.y2 + jitter[3])
            class_id = obj.class_id
            if spec.noise.misclass_prob > 0 and rng.uniform() < spec.noise.misclass_prob:
                others = [c for c in pool if c != obj.class_id]
                if others:
                    class_id = others[rng.integers(len(others))]
            det_records.append(
                Detection(
                    frame=frame,
                    class_id=class_id,
                    score=obj.score_factor(frame),
                    box=Box(x1, y1, x2, y2),
                    provenance=PROVENANCE_DETECTED,
                )
            )

        if spec.noise.false_positive_rate > 0:
            for _ in range(rng.poisson(spec.noise.false_positive_rate)):
                fw = rng.uniform(0.05, 0.15) * min(spec.width, spec.height)
                fh = rng.uniform(0.05, 0.15) * min(spec.width, spec.height)
                fcx = rng.uniform(fw / 2, spec.width - fw / 2)
                fcy = rng.uniform(fh / 2, spec.height - fh / 2)
                det_records.append(
                    Detection(
                        frame=frame,
                        class_id=pool[rng.integers(len(pool))] if pool else 0,
                        score=rng.uniform(spec.noise.fp_score_low, spec.noise.fp_score_high),
                        box=Box.from_center(fcx, fcy, fw, fh),
                        provenance=PROVENANCE_DETECTED,
                    )
                )

    gt = VideoDetectionSet.from_records(spec.video, gt_records, n_frames=spec.n_frames)
    dets = VideoDetectionSet.from_records(spec.video, det_records, n_frames=spec.n_frames)
    return gt, dets


def render_features(spec: ScenarioSpec, frame: int) -> FeaturePyramid:
    """Feature pyramid with a Gaussian blob per object over seeded background noise.

    Object ``i`` writes channel ``i % feature_channels``; the blob peak sits
    at the object center divided by the level stride, so motion translates
    the pattern by exactly ``v / stride`` cells per frame.
    """
    if not (0 <= frame < spec.n_frames):
        raise ValueError(f"frame {frame} out of range [0, {spec.n_frames})")
    levels = []
    for stride in spec.feature_strides:
        h = -(-spec.height // stride)
        w = -(-spec.width // stride)
        rng = np.random.default_rng([spec.seed, stride, frame])
        fmap = rng.uniform(0.0, 0.02, size=(spec.feature_channels, h, w))
        ys = np.arange(h)[:, None]
        xs = np.arange(w)[None, :]
        for i, obj in enumerate(spec.objects):
            if not obj.alive(frame):
                continue
            box = obj.box_at(frame)
            cx, cy = box.cx / stride, box.cy / stride
            sx = max(box.w / stride / 3.0, 0.5)
            sy = max(box.h / stride / 3.0, 0.5)
            blob = np.exp(-(((xs - cx) / sx) ** 2 + ((ys - cy) / sy) ** 2) / 2.0)
            fmap[i % spec.feature_channels] += blob
        levels.append((stride, fmap))
    return FeaturePyramid(tuple(levels), spec.height, spec.width)


def _spec_dict(spec: ScenarioSpec) -> dict:
    return asdict(spec)


def save_scenario(spec: ScenarioSpec, path) -> None:
    """Write a scenario spec as editable JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_spec_dict(spec), fh, indent=2)
        fh.write("\n")


def load_scenario(path) -> ScenarioSpec:
    """Read a scenario spec written by :func:`save_scenario` (or by hand)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed scenario JSON: {exc}") from exc
    try:
        objects = tuple(
            ObjectSpec(
                class_id=o["class_id"],
                first_frame=o["first_frame"],
                last_frame=o["last_frame"],
                cx=o["cx"],
                cy=o["cy"],
                w=o["w"],
                h=o["h"],
                vx=o.get("vx", 0.0),
                vy=o.get("vy", 0.0),
                scale_rate=o.get("scale_rate", 1.0),
                degradations=tuple(tuple(win) for win in o.get("degradations", ())),
            )
            for o in data["objects"]
        )
        noise = DetectorNoise(**data.get("noise", {}))
        return ScenarioSpec(
            width=data["width"],
            height=data["height"],
            n_frames=data["n_frames"],
            objects=objects,
            noise=noise,
            seed=data.get("seed", 0),
            video=data.get("video", "scene"),
            feature_channels=data.get("feature_channels", 8),
            feature_strides=tuple(data.get("feature_strides", (8,))),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: invalid scenario spec: {exc}") from exc


def _clean_scenario(seed: int) -> ScenarioSpec:
    objects = (
        ObjectSpec(class_id=0, first_frame=0, last_frame=47, cx=50, cy=50, w=36, h=30, vx=1.1, vy=0.6),
        ObjectSpec(class_id=1, first_frame=0, last_frame=47, cx=200, cy=60, w=30, h=40, vx=-0.8, vy=0.9),
        ObjectSpec(class_id=2, first_frame=8, last_frame=40, cx=70, cy=190, w=44, h=34, vx=1.0, vy=-0.7),
    )
    return ScenarioSpec(
        width=256, height=256, n_frames=48, objects=objects, seed=seed,
        video=f"clean-{seed}",
    )


def _degraded_scenario(seed: int) -> ScenarioSpec:
    rng = np.random.default_rng([seed, 417])
    j = lambda a, b: float(rng.uniform(a, b))

    base = ObjectSpec(
        class_id=0, first_frame=0, last_frame=63,
        cx=60 + j(-6, 6), cy=70 + j(-6, 6), w=40 + j(-4, 4), h=34 + j(-4, 4),
        vx=1.2 + j(-0.2, 0.2), vy=0.8 + j(-0.2, 0.2),
        degradations=((10, 27, 0.12),),
    )
    # Born overlapping the first object's path (different class), drifting away;
    # a low merge threshold suppresses its early detections.
    birth = 28
    bb = base.box_at(birth)
    neighbor = ObjectSpec(
        class_id=3, first_frame=birth, last_frame=63,
        cx=bb.cx + 0.28 * bb.w + j(-1.5, 1.5), cy=bb.cy + j(-2, 2),
        w=bb.w * 0.95, h=bb.h * 0.95,
        vx=base.vx + 2.4, vy=base.vy - 2.0,
    )
    objects = (
        base,
        ObjectSpec(
            class_id=1, first_frame=0, last_frame=63,
            cx=190 + j(-6, 6), cy=80 + j(-6, 6), w=36 + j(-4, 4), h=42 + j(-4, 4),
            vx=-0.9 + j(-0.2, 0.2), vy=1.0 + j(-0.2, 0.2),
            degradations=((30, 49, 0.12),),
        ),
        ObjectSpec(
            class_id=2, first_frame=0, last_frame=63,
            cx=90 + j(-6, 6), cy=190 + j(-6, 6), w=42 + j(-4, 4), h=36 + j(-4, 4),
            vx=1.0 + j(-0.2, 0.2), vy=-0.8 + j(-0.2, 0.2),
            degradations=((44, 60, 0.15),),
        ),
        neighbor,
    )
    noise = DetectorNoise(
        box_sigma=1.6, miss_prob=0.08, false_positive_rate=0.4, misclass_prob=0.0
    )
    return ScenarioSpec(
        width=288, height=288, n_frames=64, objects=objects, noise=noise, seed=seed,
        video=f"degraded-{seed}",
    )


def _fast_scenario(seed: int) -> ScenarioSpec:
    rng = np.random.default_rng([seed, 839])
    j = lambda a, b: float(rng.uniform(a, b))

    # Per-frame displacement exceeds the object width, so consecutive-frame
    # ground-truth boxes never overlap. One object is born inside its
    # degradation window: its whole early chain enters at a weak score.
    fast0 = ObjectSpec(
        class_id=0, first_frame=0, last_frame=55,
        cx=40 + j(-4, 4), cy=90 + j(-8, 8), w=22 + j(-2, 2), h=26 + j(-2, 2),
        vx=27.0 + j(-1, 1), vy=0.5 + j(-0.5, 0.5),
        degradations=((6, 26, 0.15),),
    )
    fast1 = ObjectSpec(
        class_id=1, first_frame=10, last_frame=55,
        cx=1530 + j(-4, 4), cy=250 + j(-8, 8), w=24 + j(-2, 2), h=22 + j(-2, 2),
        vx=-28.0 + j(-1, 1), vy=-0.4 + j(-0.5, 0.5),
        degradations=((10, 25, 0.15),),
    )
    slow = ObjectSpec(
        class_id=2, first_frame=0, last_frame=55,
        cx=800 + j(-10, 10), cy=330 + j(-6, 6), w=46 + j(-4, 4), h=38 + j(-4, 4),
        vx=1.0 + j(-0.3, 0.3), vy=0.3 + j(-0.2, 0.2),
    )
    noise = DetectorNoise(
        box_sigma=1.2, miss_prob=0.05, false_positive_rate=0.3, misclass_prob=0.0
    )
    return ScenarioSpec(
        width=1600, height=420, n_frames=56, objects=(fast0, fast1, slow), noise=noise,
        seed=seed, video=f"fast-{seed}",
    )


PRESETS = {
    "clean": _clean_scenario,
    "degraded": _degraded_scenario,
    "fast": _fast_scenario,
}


def preset_scenario(name: str, seed: int = 0) -> ScenarioSpec:
    """Build one of the bundled scenario families for the given seed."""
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(seed)

"""Detection, prediction, feature, and weight file formats plus the mAP evaluator.

Detection files are JSON lines, one object per detection::

    {"video": "v0", "frame": 3, "class": 7, "score": 0.91,
     "box": [x1, y1, x2, y2], "track": 4, "provenance": "detected"}

``track`` and ``provenance`` may be null. Keys are written in the order
above with repr-exact floats, so saving a loaded file reproduces it byte
for byte.

Feature pyramids and named weight tensors use the same binary layout: a
single UTF-8 JSON header line declaring shapes and element width, followed
by the raw little-endian row-major payloads in header order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .detections import Detection
from .geometry import Box, iou
from .tensor_ops import FeaturePyramid

__all__ = [
    "VID_CLASSES",
    "VideoDetectionSet",
    "EvalResult",
    "load_detections",
    "save_detections",
    "load_predictions",
    "save_predictions",
    "load_features",
    "save_features",
    "load_named_arrays",
    "save_named_arrays",
    "evaluate_map",
]

# The 30 ImageNet VID category names.
VID_CLASSES = (
    "airplane", "antelope", "bear", "bicycle", "bird", "bus", "car", "cattle",
    "dog", "domestic cat", "elephant", "fox", "giant panda", "hamster",
    "horse", "lion", "lizard", "monkey", "motorcycle", "rabbit", "red panda",
    "sheep", "snake", "squirrel", "tiger", "train", "turtle", "watercraft",
    "whale", "zebra",
)


@dataclass(frozen=True)
class VideoDetectionSet:
    """All detections of one video, grouped per frame (indices contiguous from 0)."""

    video: str
    frames: tuple[tuple[Detection, ...], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(tuple(f) for f in self.frames))
        for t, frame in enumerate(self.frames):
            for det in frame:
                if det.frame != t:
                    raise ValueError(
                        f"detection with frame {det.frame} stored under frame {t}"
                    )

    @classmethod
    def from_records(
        cls, video: str, records: Iterable[Detection], n_frames: int | None = None
    ) -> "VideoDetectionSet":
        records = list(records)
        if n_frames is None:
            n_frames = max((d.frame for d in records), default=-1) + 1
        frames: list[list[Detection]] = [[] for _ in range(n_frames)]
        for det in records:
            if det.frame >= n_frames:
                raise ValueError(f"frame {det.frame} out of range (n_frames={n_frames})")
            frames[det.frame].append(det)
        return cls(video, tuple(tuple(f) for f in frames))

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def all_detections(self) -> list[Detection]:
        return [d for frame in self.frames for d in frame]

    def class_ids(self) -> set[int]:
        return {d.class_id for frame in self.frames for d in frame}


def _detection_record(video: str, det: Detection) -> str:
    return json.dumps(
        {
            "video": video,
            "frame": det.frame,
            "class": det.class_id,
            "score": float(det.score),
            "box": [float(v) for v in det.box.corners()],
            "track": det.track,
            "provenance": det.provenance,
        }
    )


def _parse_detection(obj: dict, path: str, lineno: int) -> tuple[str, Detection]:
    try:
        box = Box(*(float(v) for v in obj["box"]))
        det = Detection(
            frame=int(obj["frame"]),
            class_id=int(obj["class"]),
            score=float(obj["score"]),
            box=box,
            track=None if obj.get("track") is None else int(obj["track"]),
            provenance=obj.get("provenance"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}:{lineno}: invalid detection record: {exc}") from exc
    return str(obj["video"]), det


def save_detections(sets: VideoDetectionSet | Sequence[VideoDetectionSet], path) -> None:
    """Write one or more videos' detections as JSON lines."""
    if isinstance(sets, VideoDetectionSet):
        sets = [sets]
    with open(path, "w", encoding="utf-8") as fh:
        for vds in sets:
            for frame in vds.frames:
                for det in frame:
                    fh.write(_detection_record(vds.video, det) + "\n")


def load_detections(path) -> list[VideoDetectionSet]:
    """Read a detection file; videos are returned in order of first appearance."""
    per_video: dict[str, list[Detection]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            video, det = _parse_detection(obj, str(path), lineno)
            per_video.setdefault(video, []).append(det)
    return [VideoDetectionSet.from_records(v, dets) for v, dets in per_video.items()]


def load_single_video(path) -> VideoDetectionSet:
    """Read a detection file that must contain exactly one video."""
    sets = load_detections(path)
    if len(sets) != 1:
        raise ValueError(f"{path}: expected exactly one video, found {len(sets)}")
    return sets[0]


def save_predictions(preds_per_frame, video: str, path) -> None:
    """Write per-frame track predictions as JSON lines.

    ``preds_per_frame`` is a sequence over frames of prediction lists, each
    aligned by index with the detections they were computed from.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for t, preds in enumerate(preds_per_frame):
            for i, p in enumerate(preds):
                src = p.source
                fh.write(
                    json.dumps(
                        {
                            "video": video,
                            "frame": t,
                            "det": i,
                            "box": [float(v) for v in p.predicted_box.corners()],
                            "quality": float(p.quality),
                            "source": {
                                "frame": src.frame,
                                "class": src.class_id,
                                "score": float(src.score),
                                "box": [float(v) for v in src.box.corners()],
                                "track": src.track,
                                "provenance": src.provenance,
                            },
                        }
                    )
                    + "\n"
                )


def load_predictions(path) -> dict[str, dict[int, list]]:
    """Read a prediction file into ``{video: {frame: [(det_index, TrackPrediction)]}}``."""
    from .tracker import TrackPrediction

    out: dict[str, dict[int, list]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                src = obj["source"]
                source = Detection(
                    frame=int(src["frame"]),
                    class_id=int(src["class"]),
                    score=float(src["score"]),
                    box=Box(*(float(v) for v in src["box"])),
                    track=None if src.get("track") is None else int(src["track"]),
                    provenance=src.get("provenance"),
                )
                pred = TrackPrediction(
                    source=source,
                    predicted_box=Box(*(float(v) for v in obj["box"])),
                    quality=float(obj["quality"]),
                )
                video, frame, det = str(obj["video"]), int(obj["frame"]), int(obj["det"])
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: invalid prediction record: {exc}") from exc
            out.setdefault(video, {}).setdefault(frame, []).append((det, pred))
    for frames in out.values():
        for preds in frames.values():
            preds.sort(key=lambda item: item[0])
    return out


def align_predictions(vds: VideoDetectionSet, loaded: dict[int, list]) -> list[list]:
    """Expand loaded predictions into per-frame lists aligned with ``vds``.

    Every frame with detections must carry predictions for indices
    ``0..len(frame)-1`` or none at all (missing frames get empty lists).
    """
    aligned: list[list] = []
    for t, frame in enumerate(vds.frames):
        entries = loaded.get(t, [])
        if not entries:
            aligned.append([])
            continue
        indices = [i for i, _ in entries]
        if indices != list(range(len(frame))):
            raise ValueError(
                f"frame {t}: prediction indices {indices} do not cover the "
                f"{len(frame)} detections"
            )
        aligned.append([p for _, p in entries])
    return aligned


_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def save_features(pyr: FeaturePyramid, path, dtype: str = "<f8") -> None:
    """Write a feature pyramid: JSON header line, then raw level payloads."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    header = {
        "format": "feature-pyramid",
        "version": 1,
        "image_height": pyr.image_height,
        "image_width": pyr.image_width,
        "dtype": dtype,
        "levels": [
            {"stride": s, "channels": m.shape[0], "height": m.shape[1], "width": m.shape[2]}
            for s, m in pyr.levels
        ],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for _, fmap in pyr.levels:
            fh.write(np.ascontiguousarray(fmap, dtype=_DTYPES[dtype]).tobytes())


def load_features(path) -> FeaturePyramid:
    """Read a feature pyramid file, verifying the payload against the header."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed feature header: {exc}") from exc
    if header.get("format") != "feature-pyramid":
        raise ValueError(f"{path}: not a feature pyramid file")
    if not header.get("levels"):
        raise ValueError(f"{path}: empty pyramid (no levels declared)")
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise ValueError(f"{path}: unsupported element dtype {header.get('dtype')!r}")

    expected = sum(
        lv["channels"] * lv["height"] * lv["width"] for lv in header["levels"]
    ) * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload size mismatch: header declares {expected} bytes, "
            f"file has {len(payload)}"
        )
    levels = []
    offset = 0
    for lv in header["levels"]:
        shape = (lv["channels"], lv["height"], lv["width"])
        count = shape[0] * shape[1] * shape[2]
        arr = np.frombuffer(
            payload, dtype=dtype, count=count, offset=offset
        ).reshape(shape).astype(np.float64)
        offset += count * dtype.itemsize
        levels.append((lv["stride"], arr))
    return FeaturePyramid(tuple(levels), header["image_height"], header["image_width"])


def save_named_arrays(arrays: dict[str, np.ndarray], path) -> None:
    """Write named float64 arrays: JSON header line, then raw payloads in order."""
    items = [(name, np.ascontiguousarray(a, dtype="<f8")) for name, a in arrays.items()]
    header = {
        "format": "named-tensors",
        "version": 1,
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": "<f8"} for n, a in items],
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for _, a in items:
            fh.write(a.tobytes())


def load_named_arrays(path) -> dict[str, np.ndarray]:
    """Read a named-tensor container written by :func:`save_named_arrays`."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: malformed tensor header: {exc}") from exc
    if header.get("format") != "named-tensors":
        raise ValueError(f"{path}: not a named-tensor file")
    out: dict[str, np.ndarray] = {}
    offset = 0
    dtype = np.dtype("<f8")
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * dtype.itemsize
        if end > len(payload):
            raise ValueError(f"{path}: payload truncated at array {spec['name']!r}")
        out[spec["name"]] = np.frombuffer(
            payload, dtype=dtype, count=count, offset=offset
        ).reshape(shape).copy()
        offset = end
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return out


@dataclass(frozen=True)
class EvalResult:
    """Per-class average precision and their mean over classes with ground truth."""

    per_class_ap: dict[int, float]
    mean_ap: float
    iou_thresh: float


def _average_precision(matches: list[tuple[float, bool]], n_gt: int) -> float:
    """All-point interpolated AP from (score, is_tp) pairs in ranked order."""
    if n_gt == 0:
        return 0.0
    if not matches:
        return 0.0
    tp = np.cumsum([1.0 if m else 0.0 for _, m in matches])
    fp = np.cumsum([0.0 if m else 1.0 for _, m in matches])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # Precision envelope, then area under it over recall.
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def evaluate_map(
    preds: VideoDetectionSet | Sequence[VideoDetectionSet],
    gt: VideoDetectionSet | Sequence[VideoDetectionSet],
    iou_thresh: float = 0.5,
) -> EvalResult:
    """Mean average precision of predictions against ground truth.

    Predictions are ranked per class by score (ties keep file order) and
    greedily matched to the highest-overlap unmatched ground-truth box in
    the same video and frame at ``iou_thresh`` or better. AP uses all-point
    interpolation; the mean runs over classes with at least one ground-truth
    instance.
    """
    if isinstance(preds, VideoDetectionSet):
        preds = [preds]
    if isinstance(gt, VideoDetectionSet):
        gt = [gt]
    gt_by_video = {v.video: v for v in gt}
    if len(gt_by_video) != len(gt):
        raise ValueError("duplicate video ids in ground truth")
    for p in preds:
        if p.video not in gt_by_video:
            raise ValueError(f"predictions reference unknown video {p.video!r}")

    classes = sorted({c for v in gt for c in v.class_ids()})
    gt_counts = {c: 0 for c in classes}
    for v in gt:
        for det in v.all_detections():
            gt_counts[det.class_id] += 1

    # (video, frame, class) -> list of (gt Detection, matched flag holder)
    gt_index: dict[tuple[str, int, int], list[list]] = {}
    for v in gt:
        for det in v.all_detections():
            gt_index.setdefault((v.video, det.frame, det.class_id), []).append([det, False])

    ranked: dict[int, list[tuple[float, str, Detection]]] = {c: [] for c in classes}
    for v in preds:
        for det in v.all_detections():
            if det.class_id in ranked:
                ranked[det.class_id].append((det.score, v.video, det))

    per_class_ap: dict[int, float] = {}
    for c in classes:
        entries = ranked[c]
        order = sorted(range(len(entries)), key=lambda i: -entries[i][0])
        matches: list[tuple[float, bool]] = []
        for i in order:
            score, video, det = entries[i]
            candidates = gt_index.get((video, det.frame, c), [])
            best_iou = 0.0
            best_slot = None
            for slot in candidates:
                if slot[1]:
                    continue
                v = iou(det.box, slot[0].box)
                if v > best_iou:
                    best_iou, best_slot = v, slot
            if best_slot is not None and best_iou >= iou_thresh:
                best_slot[1] = True
                matches.append((score, True))
            else:
                matches.append((score, False))
        per_class_ap[c] = _average_precision(matches, gt_counts[c])

    mean_ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalResult(per_class_ap=per_class_ap, mean_ap=mean_ap, iou_thresh=iou_thresh)

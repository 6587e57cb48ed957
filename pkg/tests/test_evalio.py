import json

import numpy as np
import pytest

from vodtrack.detections import Detection
from vodtrack.evalio import (
    VideoDetectionSet,
    align_predictions,
    evaluate_map,
    load_detections,
    load_features,
    load_named_arrays,
    load_predictions,
    save_detections,
    save_features,
    save_named_arrays,
    save_predictions,
)
from vodtrack.geometry import Box
from vodtrack.tensor_ops import FeaturePyramid
from vodtrack.tracker import TrackPrediction


def det(frame, cls, score, corners, track=None, provenance=None):
    return Detection(frame, cls, score, Box(*corners), track=track, provenance=provenance)


def random_set(rng, video="v0", n_frames=5) -> VideoDetectionSet:
    records = []
    for frame in range(n_frames):
        for _ in range(int(rng.integers(0, 4))):
            cx, cy = rng.uniform(0, 80, 2)
            w, h = rng.uniform(4, 20, 2)
            records.append(
                Detection(
                    frame,
                    int(rng.integers(0, 3)),
                    float(rng.uniform(0.01, 1.0)),
                    Box.from_center(cx, cy, w, h),
                    track=int(rng.integers(0, 9)) if rng.uniform() < 0.5 else None,
                    provenance="detected" if rng.uniform() < 0.5 else None,
                )
            )
    return VideoDetectionSet.from_records(video, records, n_frames=n_frames)


class TestDetectionFiles:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert load_detections(p) == []

    def test_round_trip_identical(self, tmp_path):
        rng = np.random.default_rng(81)
        vds = random_set(rng)
        p = tmp_path / "dets.jsonl"
        save_detections(vds, p)
        (loaded,) = load_detections(p)
        assert loaded.video == vds.video
        assert loaded.all_detections() == vds.all_detections()

    def test_save_load_save_byte_identical(self, tmp_path):
        rng = np.random.default_rng(83)
        vds = random_set(rng)
        p1 = tmp_path / "a.jsonl"
        p2 = tmp_path / "b.jsonl"
        save_detections(vds, p1)
        save_detections(load_detections(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_negative_extent_names_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        good = json.dumps({"video": "v", "frame": 0, "class": 0, "score": 0.5,
                           "box": [0, 0, 5, 5], "track": None, "provenance": None})
        bad = json.dumps({"video": "v", "frame": 1, "class": 0, "score": 0.5,
                          "box": [5, 5, 0, 9], "track": None, "provenance": None})
        p.write_text(good + "\n" + bad + "\n")
        with pytest.raises(ValueError, match=r"bad\.jsonl:2"):
            load_detections(p)

    def test_malformed_json_names_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("{not json}\n")
        with pytest.raises(ValueError, match=r"bad\.jsonl:1.*malformed"):
            load_detections(p)

    def test_multi_video_order(self, tmp_path):
        rng = np.random.default_rng(85)
        a = random_set(rng, video="vid-b")
        b = random_set(rng, video="vid-a")
        p = tmp_path / "multi.jsonl"
        save_detections([a, b], p)
        loaded = load_detections(p)
        assert [v.video for v in loaded] == ["vid-b", "vid-a"]


class TestPredictionFiles:
    def test_round_trip_and_alignment(self, tmp_path):
        src0 = det(0, 1, 0.9, (0, 0, 10, 10), track=4, provenance="detected")
        src1 = det(0, 2, 0.8, (20, 20, 30, 30))
        preds = [
            [TrackPrediction(src0, Box(1, 1, 11, 11), 0.95),
             TrackPrediction(src1, Box(21, 21, 31, 31), 0.7)],
            [],
        ]
        p = tmp_path / "preds.jsonl"
        save_predictions(preds, "v0", p)
        loaded = load_predictions(p)
        assert set(loaded) == {"v0"}
        vds = VideoDetectionSet.from_records("v0", [src0, src1], n_frames=2)
        aligned = align_predictions(vds, loaded["v0"])
        assert len(aligned[0]) == 2
        assert aligned[0][0].source == src0
        assert aligned[0][0].predicted_box.corners() == (1, 1, 11, 11)
        assert aligned[1] == []

    def test_misaligned_indices_rejected(self, tmp_path):
        src0 = det(0, 1, 0.9, (0, 0, 10, 10))
        preds = [[TrackPrediction(src0, Box(1, 1, 11, 11), 0.95)]]
        p = tmp_path / "preds.jsonl"
        save_predictions(preds, "v0", p)
        vds = VideoDetectionSet.from_records(
            "v0", [src0, det(0, 2, 0.8, (20, 20, 30, 30))], n_frames=1
        )
        with pytest.raises(ValueError, match="do not cover"):
            align_predictions(vds, load_predictions(p)["v0"])


class TestFeatureFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(87)
        pyr = FeaturePyramid(
            ((4, rng.random((4, 8, 8))), (8, rng.random((2, 4, 4)))), 32, 32
        )
        p = tmp_path / "f.feat"
        save_features(pyr, p)
        loaded = load_features(p)
        assert loaded.strides == (4, 8)
        assert loaded.image_height == 32
        for (sa, ma), (sb, mb) in zip(pyr.levels, loaded.levels):
            assert sa == sb
            assert np.array_equal(ma, mb)

    def test_single_level_size(self, tmp_path):
        pyr = FeaturePyramid(((4, np.arange(256.0).reshape(4, 8, 8)),), 32, 32)
        p = tmp_path / "f.feat"
        save_features(pyr, p)
        loaded = load_features(p)
        assert loaded.levels[0][1].size == 256

    def test_float32_widened(self, tmp_path):
        rng = np.random.default_rng(89)
        pyr = FeaturePyramid(((4, rng.random((2, 8, 8))),), 32, 32)
        p = tmp_path / "f.feat"
        save_features(pyr, p, dtype="<f4")
        loaded = load_features(p)
        assert loaded.levels[0][1].dtype == np.float64
        assert np.allclose(loaded.levels[0][1], pyr.levels[0][1], atol=1e-6)

    def test_empty_pyramid_header_rejected(self, tmp_path):
        p = tmp_path / "f.feat"
        header = {"format": "feature-pyramid", "version": 1, "image_height": 8,
                  "image_width": 8, "dtype": "<f8", "levels": []}
        p.write_bytes((json.dumps(header) + "\n").encode())
        with pytest.raises(ValueError, match="empty pyramid"):
            load_features(p)

    def test_truncated_payload_rejected(self, tmp_path):
        rng = np.random.default_rng(91)
        pyr = FeaturePyramid(((4, rng.random((2, 8, 8))),), 32, 32)
        p = tmp_path / "f.feat"
        save_features(pyr, p)
        data = p.read_bytes()
        p.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="size mismatch"):
            load_features(p)


class TestNamedArrays:
    def test_round_trip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(93)
        arrays = {"a": rng.random((3, 4)), "b": rng.random(7), "c": rng.random((2, 2, 2))}
        p1 = tmp_path / "x.tensors"
        p2 = tmp_path / "y.tensors"
        save_named_arrays(arrays, p1)
        save_named_arrays(load_named_arrays(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncation_detected(self, tmp_path):
        p = tmp_path / "x.tensors"
        save_named_arrays({"a": np.ones(4)}, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_named_arrays(p)

    def test_trailing_bytes_detected(self, tmp_path):
        p = tmp_path / "x.tensors"
        save_named_arrays({"a": np.ones(4)}, p)
        p.write_bytes(p.read_bytes() + b"\x00" * 8)
        with pytest.raises(ValueError, match="trailing"):
            load_named_arrays(p)


def gt_two_boxes():
    return VideoDetectionSet.from_records(
        "v",
        [det(0, 0, 1.0, (0, 0, 10, 10), track=0), det(1, 0, 1.0, (30, 30, 40, 40), track=1)],
        n_frames=2,
    )


class TestEvaluateMap:
    def test_perfect_predictions(self):
        gt = gt_two_boxes()
        assert evaluate_map(gt, gt).mean_ap == 1.0

    def test_no_predictions(self):
        gt = gt_two_boxes()
        empty = VideoDetectionSet.from_records("v", [], n_frames=2)
        result = evaluate_map(empty, gt)
        assert result.per_class_ap == {0: 0.0}
        assert result.mean_ap == 0.0

    def test_hand_pr_example(self):
        # ranked TP, FP, TP over 2 ground truths: AP = 0.5 * 1.0 + 0.5 * (2/3)
        gt = gt_two_boxes()
        preds = VideoDetectionSet.from_records(
            "v",
            [
                det(0, 0, 0.9, (0, 0, 10, 10)),
                det(0, 0, 0.8, (70, 70, 80, 80)),
                det(1, 0, 0.7, (30, 30, 40, 40)),
            ],
            n_frames=2,
        )
        result = evaluate_map(preds, gt)
        assert result.per_class_ap[0] == pytest.approx(0.5 + 1.0 / 3, abs=1e-12)

    def test_monotone_score_transform_invariance(self):
        rng = np.random.default_rng(95)
        gt = random_set(rng, n_frames=4)
        preds = random_set(rng, n_frames=4)
        base = evaluate_map(preds, gt).mean_ap
        squeezed = VideoDetectionSet.from_records(
            "v0",
            [d.with_score(0.25 + d.score / 2) for d in preds.all_detections()],
            n_frames=4,
        )
        assert evaluate_map(squeezed, gt).mean_ap == pytest.approx(base, abs=1e-12)

    def test_appending_fp_never_increases(self):
        gt = gt_two_boxes()
        preds = [det(0, 0, 0.9, (0, 0, 10, 10))]
        base = evaluate_map(
            VideoDetectionSet.from_records("v", preds, n_frames=2), gt
        ).per_class_ap[0]
        worse = preds + [det(1, 0, 0.1, (70, 70, 80, 80))]
        with_fp = evaluate_map(
            VideoDetectionSet.from_records("v", worse, n_frames=2), gt
        ).per_class_ap[0]
        assert with_fp <= base

    def test_appending_matching_tp_never_decreases(self):
        gt = gt_two_boxes()
        preds = [det(0, 0, 0.9, (0, 0, 10, 10))]
        base = evaluate_map(
            VideoDetectionSet.from_records("v", preds, n_frames=2), gt
        ).per_class_ap[0]
        better = preds + [det(1, 0, 0.1, (30, 30, 40, 40))]
        with_tp = evaluate_map(
            VideoDetectionSet.from_records("v", better, n_frames=2), gt
        ).per_class_ap[0]
        assert with_tp >= base

    def test_greedy_takes_highest_iou(self):
        # one prediction overlapping two gts: must match the higher-IoU one,
        # leaving the other for the later prediction
        gt = VideoDetectionSet.from_records(
            "v",
            [det(0, 0, 1.0, (0, 0, 10, 10), track=0), det(0, 0, 1.0, (4, 0, 14, 10), track=1)],
            n_frames=1,
        )
        preds = VideoDetectionSet.from_records(
            "v",
            [det(0, 0, 0.9, (3.6, 0, 13.6, 10)), det(0, 0, 0.8, (0.5, 0, 10.5, 10))],
            n_frames=1,
        )
        result = evaluate_map(preds, gt)
        assert result.per_class_ap[0] == 1.0

    def test_double_match_forbidden(self):
        gt = VideoDetectionSet.from_records(
            "v", [det(0, 0, 1.0, (0, 0, 10, 10), track=0)], n_frames=1
        )
        preds = VideoDetectionSet.from_records(
            "v",
            [det(0, 0, 0.9, (0, 0, 10, 10)), det(0, 0, 0.8, (0.2, 0, 10.2, 10))],
            n_frames=1,
        )
        result = evaluate_map(preds, gt)
        # second prediction is an unmatched duplicate: precision 1/2 at recall 1
        assert result.per_class_ap[0] == 1.0

    def test_map_is_mean_of_included_aps(self):
        rng = np.random.default_rng(97)
        gt = random_set(rng, n_frames=4)
        preds = random_set(rng, n_frames=4)
        result = evaluate_map(preds, gt)
        assert 0.0 <= result.mean_ap <= 1.0
        assert result.mean_ap == pytest.approx(
            float(np.mean(list(result.per_class_ap.values()))), abs=1e-12
        )

    def test_unknown_video_rejected(self):
        gt = gt_two_boxes()
        other = VideoDetectionSet.from_records("other", [], n_frames=1)
        with pytest.raises(ValueError, match="unknown video"):
            evaluate_map(other, gt)

"""
Tests για τα metrics, το evaluation protocol και το compatibility matrix.
"""

import math

import numpy as np
import pytest
import torch

from .errors import InvalidArgumentError, UndefinedMetricError
from .evaluation_service import (
    IOU_THRESHOLDS,
    ScoredDetection,
    average_precision,
    baseline_columns,
    coco_map,
    compatibility_matrix,
    dataset_map,
    embed_into_boxes,
    evaluate_patch_set,
    grayscale_sweep,
    group_patch_sets,
    iou,
    map_drop,
    map_report,
    read_eval_records,
    write_eval_records,
)
from .dataset_parser import prepare_samples
from .geometry import BBox
from .patch_core import baseline_patch, init_patch
from .schemas import EvalParams, PatchKind

SMALL = EvalParams(patch_size=16, gray_levels=[0.5], noise_count=1)


def _det(image_id, box, score):
    return ScoredDetection(image_id=image_id, box=box, score=score)


def _oracle_ap(dets, gt, thresh):
    """Ανεξάρτητο PR-curve oracle: greedy matching και 101-point envelope."""
    n_gt = sum(len(b) for b in gt)
    used = [[False] * len(b) for b in gt]
    hits = []
    for d in sorted(dets, key=lambda d: -d.score):
        candidates = [
            (iou(d.box, g), j) for j, g in enumerate(gt[d.image_id]) if not used[d.image_id][j]
        ]
        candidates = [c for c in candidates if c[0] >= thresh]
        if candidates:
            used[d.image_id][max(candidates)[1]] = True
            hits.append(1)
        else:
            hits.append(0)
    points = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        points.append((tp / n_gt, tp / k))
    total = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        reachable = [p for rec, p in points if rec >= r]
        total += max(reachable) if reachable else 0.0
    return total / 101


# ==================== IOU / AP ====================


def test_iou_examples():
    a = BBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(5, 5, 1, 1)) == 0.0
    assert iou(a, BBox(1, 1, 2, 2)) == pytest.approx(1 / 7)


def test_ap_trivial_cases():
    gt = [[BBox(0, 0, 10, 10)]]
    assert average_precision([_det(0, BBox(0, 0, 10, 10), 0.9)], gt, 0.5) == 1.0
    assert average_precision([], gt, 0.5) == 0.0
    with pytest.raises(UndefinedMetricError):
        average_precision([], [[]], 0.5)


def test_ap_against_hand_oracle():
    gt = [[BBox(0, 0, 10, 10), BBox(50, 50, 10, 10)]]
    dets = [
        _det(0, BBox(0, 0, 10, 10), 0.9),
        _det(0, BBox(100, 100, 10, 10), 0.8),
        _det(0, BBox(50, 50, 10, 10), 0.7),
    ]
    expected = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert average_precision(dets, gt, 0.5) == pytest.approx(expected, abs=1e-9)
    assert average_precision(dets, gt, 0.5) == pytest.approx(_oracle_ap(dets, gt, 0.5), abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_ap_against_random_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = []
    for _ in range(3):
        boxes = []
        for _ in range(rng.integers(1, 4)):
            x, y = rng.uniform(0, 80, 2)
            boxes.append(BBox(float(x), float(y), float(rng.uniform(10, 30)), float(rng.uniform(10, 30))))
        gt.append(boxes)
    dets = []
    for image_id, boxes in enumerate(gt):
        for box in boxes:
            for _ in range(2):
                dx, dy = rng.normal(0, 3, 2)
                dets.append(_det(image_id, BBox(box.x + dx, box.y + dy, box.w, box.h), float(rng.random())))
        dets.append(_det(image_id, BBox(0.5, 90.0, 5.0, 5.0), float(rng.random())))

    for thresh in IOU_THRESHOLDS:
        assert average_precision(dets, gt, float(thresh)) == pytest.approx(_oracle_ap(dets, gt, float(thresh)), abs=1e-9)
    per_threshold = [_oracle_ap(dets, gt, float(t)) for t in IOU_THRESHOLDS]
    assert coco_map(dets, gt) == pytest.approx(float(np.mean(per_threshold)), abs=1e-9)


def test_ap_is_rank_based_and_monotone_in_threshold():
    rng = np.random.default_rng(11)
    gt = [[BBox(10, 10, 20, 20), BBox(40, 40, 20, 20)]]
    dets = [_det(0, BBox(10 + d, 10, 20, 20), float(s)) for d, s in zip(rng.uniform(0, 6, 6), rng.random(6))]
    dets += [_det(0, BBox(40, 40 + d, 20, 20), float(s)) for d, s in zip(rng.uniform(0, 6, 4), rng.random(4))]

    transformed = [_det(d.image_id, d.box, math.exp(3 * d.score) / 100) for d in dets]
    aps = [average_precision(dets, gt, float(t)) for t in IOU_THRESHOLDS]
    assert [average_precision(transformed, gt, float(t)) for t in IOU_THRESHOLDS] == aps
    assert all(a >= b for a, b in zip(aps, aps[1:]))


def test_coco_map_examples():
    gt = [[BBox(0, 0, 10, 10)], [BBox(20, 20, 10, 10)]]
    perfect = [_det(0, BBox(0, 0, 10, 10), 0.9), _det(1, BBox(20, 20, 10, 10), 0.8)]
    assert coco_map(perfect, gt) == 1.0

    # IoU 0.56: AP = 1 στα thresholds 0.50 και 0.55, 0 στα υπόλοιπα
    partial = [_det(0, BBox(0, 0, 10, 5.6), 0.9), _det(1, BBox(20, 20, 10, 5.6), 0.8)]
    assert coco_map(partial, gt) == pytest.approx(0.2)

    report = map_report(partial, gt)
    assert report.map == float(np.mean(report.per_threshold))
    assert report.ap50 == 1.0


def test_map_drop_examples():
    assert map_drop(0.8, 0.3) == pytest.approx(0.5)
    assert map_drop(0.8, 0.8) == 0.0
    assert map_drop(0.3, 0.4) == pytest.approx(-0.1)


# ==================== PATCH SETS ====================


def test_evaluate_gray_singleton(toy_red, red_dataset):
    gray = baseline_patch(PatchKind.GRAYSCALE, level=0.5, height=16, width=16)
    record = evaluate_patch_set(toy_red, red_dataset, [gray], 0.75, params=SMALL)
    assert record.map_clean >= 0.95
    assert math.isfinite(record.map_drop)
    assert record.patch_set_id == "gray(0.5)"
    assert record.per_patch_drops == [record.map_drop]
    assert record.map_drop == pytest.approx(record.map_clean - record.map_patched, abs=1e-12)

    again = evaluate_patch_set(toy_red, red_dataset, [gray], 0.75, params=SMALL)
    assert again == record


def test_evaluate_rejects_empty_set(toy_red, red_dataset):
    with pytest.raises(InvalidArgumentError):
        evaluate_patch_set(toy_red, red_dataset, [])


def test_evaluate_never_mutates_images(toy_red, red_dataset):
    samples = prepare_samples(red_dataset, toy_red.input_size)
    before = [s.image.clone() for s in samples]
    clean = dataset_map(toy_red, samples, SMALL)
    noise = baseline_patch(PatchKind.UNIFORM_NOISE, seed=0, height=16, width=16)
    evaluate_patch_set(toy_red, red_dataset, [noise], params=SMALL, samples=samples)
    assert all(torch.equal(a, s.image) for a, s in zip(before, samples))
    assert dataset_map(toy_red, samples, SMALL) == clean


def test_tiny_boxes_are_skipped():
    image = torch.zeros(3, 32, 32)
    gray = baseline_patch(PatchKind.GRAYSCALE, level=1.0, height=12, width=12)
    boxes = [BBox(4, 4, 16, 16), BBox(25, 2, 1, 5)]
    out = embed_into_boxes(image, gray, boxes, 0.75)
    # 0.75 × 16 = 12 px στο κέντρο (12, 12), το 1×5 box δεν παίρνει patch
    assert float(out[:, 6:18, 6:18].min()) == 1.0
    assert float(out.sum()) == 3 * 12 * 12


def test_per_patch_drops_follow_the_set(toy_red, red_dataset):
    patches = [init_patch(seed, 16, 16, source_model="toy-red") for seed in range(3)]
    record = evaluate_patch_set(toy_red, red_dataset, patches, params=SMALL)
    assert len(record.per_patch_drops) == 3
    assert record.patch_ids == ["toy-red-s0", "toy-red-s1", "toy-red-s2"]
    assert record.map_drop == pytest.approx(float(np.mean(record.per_patch_drops)), abs=1e-12)


def test_grayscale_sweep_shape(toy_red, red_dataset):
    sweep = grayscale_sweep(toy_red, red_dataset, [0.0, 0.5, 1.0, 0.5], params=SMALL)
    assert [level for level, _ in sweep] == [0.0, 0.5, 1.0, 0.5]
    assert all(math.isfinite(drop) for _, drop in sweep)
    assert sweep[1][1] == sweep[3][1]
    with pytest.raises(InvalidArgumentError):
        grayscale_sweep(toy_red, red_dataset, [])


# ==================== MATRIX ====================


def test_baseline_columns():
    columns = baseline_columns(EvalParams(patch_size=16, gray_levels=[0.0, 0.5], noise_count=2))
    assert list(columns) == ["noise", "gray(0)", "gray(0.5)"]
    assert [p.patch_id for p in columns["noise"]] == ["noise-s0", "noise-s1"]


def test_baseline_columns_drop_repeated_levels():
    params = EvalParams(patch_size=16, gray_levels=[0.5, 0.0, 0.5])
    assert params.gray_levels == [0.5, 0.0]
    assert list(baseline_columns(params)) == ["noise", "gray(0.5)", "gray(0)"]


def test_one_by_one_matrix_matches_evaluate(toy_red, red_dataset):
    patches = [init_patch(seed, 16, 16, source_model="toy-red") for seed in range(2)]
    matrix = compatibility_matrix({"toy-red": patches}, {"toy-red": toy_red}, red_dataset, SMALL)
    record = evaluate_patch_set(toy_red, red_dataset, patches, params=SMALL)

    assert matrix.labels == ["noise", "gray(0.5)", "toy-red"]
    assert matrix.cell("toy-red", "toy-red") == pytest.approx(record.map_drop, abs=1e-12)
    assert matrix.rowwise_mean == [matrix.cell("toy-red", "toy-red")]
    for rec in matrix.records:
        assert matrix.cell(rec.model, rec.patch_set_id) == pytest.approx(float(np.mean(rec.per_patch_drops)), abs=1e-12)


def test_matrix_columns_track_labels(toy_red, red_dataset):
    a = [init_patch(0, 16, 16, source_model="a")]
    b = [init_patch(1, 16, 16, source_model="b")]
    forward = compatibility_matrix({"a": a, "b": b}, {"toy-red": toy_red}, red_dataset, SMALL)
    backward = compatibility_matrix({"b": b, "a": a}, {"toy-red": toy_red}, red_dataset, SMALL)
    assert forward.source_labels == ["a", "b"] and backward.source_labels == ["b", "a"]
    for label in ("a", "b", "noise"):
        assert forward.cell("toy-red", label) == backward.cell("toy-red", label)


def test_matrix_marks_missing_rows(toy_red, red_dataset):
    patches = [init_patch(0, 16, 16, source_model="toy-red")]
    matrix = compatibility_matrix(
        {"toy-red": patches}, {"toy-red": toy_red, "yolov8n": None}, red_dataset, SMALL, jobs=2
    )
    assert matrix.eval_labels == ["toy-red", "yolov8n"]
    assert matrix.cells[1] == [None, None, None]
    assert matrix.rowwise_mean[1] is None
    assert any(f.startswith("yolov8n") for f in matrix.failures)
    assert all(v is not None for v in matrix.cells[0])


def test_matrix_rejects_bad_sets(toy_red, red_dataset):
    with pytest.raises(InvalidArgumentError):
        compatibility_matrix({"toy-red": []}, {"toy-red": toy_red}, red_dataset, SMALL)
    with pytest.raises(InvalidArgumentError):
        compatibility_matrix(
            {"noise": [init_patch(0, 16, 16)]}, {"toy-red": toy_red}, red_dataset, SMALL
        )


# ==================== RECORDS ====================


def test_group_patch_sets():
    patches = [
        init_patch(0, 16, 16, source_model="toy-blue"),
        baseline_patch(PatchKind.GRAYSCALE, level=0.5, height=16, width=16),
        init_patch(1, 16, 16, source_model="toy-red"),
        baseline_patch(PatchKind.UNIFORM_NOISE, seed=3, height=16, width=16),
        init_patch(2, 16, 16, source_model="toy-blue"),
    ]
    groups = group_patch_sets(patches)
    assert list(groups) == ["toy-blue", "gray(0.5)", "toy-red", "noise"]
    assert [p.meta.seed for p in groups["toy-blue"]] == [0, 2]


def test_eval_records_round_trip(toy_red, red_dataset, tmp_path):
    gray = baseline_patch(PatchKind.GRAYSCALE, level=0.5, height=16, width=16)
    record = evaluate_patch_set(toy_red, red_dataset, [gray], params=SMALL)
    path = write_eval_records([record, record], tmp_path / "eval.jsonl")
    assert read_eval_records(path) == [record, record]

    path.write_text('{"model": "x"}\n', encoding="utf-8")
    with pytest.raises(InvalidArgumentError):
        read_eval_records(path)
    with pytest.raises(FileNotFoundError):
        read_eval_records(tmp_path / "missing.jsonl")

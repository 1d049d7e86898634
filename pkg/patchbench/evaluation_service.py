"""
Evaluation Service - mAP, mAP drop και compatibility matrix.

Πρωτόκολλο:
1. mAP του detector στο καθαρό dataset (μία φορά)
2. Για κάθε patch: embed στο κέντρο κάθε ground truth box (0.75 × μικρότερη
   πλευρά, χωρίς augmentation) και νέο mAP
3. drop = mAP_clean − mAP_patched, μέσος όρος πάνω στο patch set

Το mAP είναι COCO-style: greedy matching (υψηλότερο score πρώτα),
101-point interpolation, μέσος όρος στα IoU thresholds 0.50:0.05:0.95.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, ValidationError

from .dataset_parser import AnnotatedDataset, PreparedSample, prepare_samples
from .detector_service import DetectorAdapter
from .errors import InvalidArgumentError, PatchBenchError, UndefinedMetricError
from .geometry import BBox, embed_patch, target_square
from .patch_core import Patch, baseline_patch
from .schemas import EvalParams, PatchKind

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
NOISE_LABEL = "noise"


def gray_label(level: float) -> str:
    return f"gray({level:g})"


@dataclass(frozen=True)
class ScoredDetection:
    """Ένα detection μαζί με την εικόνα στην οποία ανήκει."""

    image_id: int
    box: BBox
    score: float


class MapResult(BaseModel):
    map: float
    ap50: float
    per_threshold: List[float]


class EvalRecord(BaseModel):
    """
    Αποτέλεσμα ενός patch set σε έναν detector και ένα dataset.

    map_drop = map_clean − map_patched, όπου map_patched είναι ο μέσος όρος
    των mAP ανά patch. map_drop_normalized = map_drop / map_clean.
    """

    model: str
    patch_set_id: str
    dataset_id: str
    map_clean: float = Field(..., ge=0, le=1)
    map_patched: float = Field(..., ge=0, le=1)
    map_drop: float
    per_patch_drops: List[float]
    patch_ids: List[str]
    ap50_clean: float
    ap50_patched: float
    map_drop_normalized: float


class CompatibilityMatrix(BaseModel):
    """
    Evaluators (γραμμές) × στήλες.

    Οι στήλες είναι πρώτα τα baselines (noise, gray(g)) και μετά οι sources.
    Κελί None σημαίνει ότι το evaluation απέτυχε. Το rowwise_mean είναι
    ο μέσος όρος μόνο στις source στήλες που υπάρχουν.
    """

    eval_labels: List[str]
    baseline_labels: List[str]
    source_labels: List[str]
    cells: List[List[Optional[float]]]
    rowwise_mean: List[Optional[float]]
    failures: List[str] = Field(default_factory=list)
    records: List[EvalRecord] = Field(default_factory=list)

    @property
    def labels(self) -> List[str]:
        return self.baseline_labels + self.source_labels

    def cell(self, evaluator: str, column: str) -> Optional[float]:
        return self.cells[self.eval_labels.index(evaluator)][self.labels.index(column)]

    def to_dict(self) -> dict:
        return {
            "eval_labels": self.eval_labels,
            "labels": self.labels,
            "baseline_labels": self.baseline_labels,
            "source_labels": self.source_labels,
            "cells": self.cells,
            "rowwise_mean": self.rowwise_mean,
            "failures": self.failures,
        }


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union δύο boxes."""
    ax1, ay1, ax2, ay2 = a.xyxy()
    bx1, by1, bx2, by2 = b.xyxy()
    inter_w = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    inter_h = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _as_gt_map(gt: Union[Mapping[int, Sequence[BBox]], Sequence[Sequence[BBox]]]) -> Dict[int, Sequence[BBox]]:
    return dict(gt) if isinstance(gt, Mapping) else dict(enumerate(gt))


def average_precision(
    dets: Sequence[ScoredDetection],
    gt: Union[Mapping[int, Sequence[BBox]], Sequence[Sequence[BBox]]],
    iou_thresh: float,
) -> float:
    """
    AP σε ένα IoU threshold.

    Τα detections ταξινομούνται κατά φθίνον score (stable). Κάθε detection
    παίρνει το unmatched GT της ίδιας εικόνας με το μεγαλύτερο IoU ≥ threshold.
    Η precision γίνεται μονότονη και δειγματοληπτείται σε 101 recall σημεία.

    Raises:
        UndefinedMetricError: Αν δεν υπάρχει κανένα ground truth box
    """
    gt = _as_gt_map(gt)
    n_gt = sum(len(boxes) for boxes in gt.values())
    if n_gt == 0:
        raise UndefinedMetricError("average precision is undefined without ground truth boxes")
    if not dets:
        return 0.0

    scores = np.array([-d.score for d in dets], dtype=np.float64)
    order = np.argsort(scores, kind="mergesort")
    matched = {image_id: [False] * len(boxes) for image_id, boxes in gt.items()}

    tp = np.zeros(len(dets))
    for rank, index in enumerate(order):
        det = dets[index]
        boxes = gt.get(det.image_id, ())
        best, best_iou = -1, min(iou_thresh, 1.0 - 1e-10)
        for j, box in enumerate(boxes):
            if matched[det.image_id][j]:
                continue
            overlap = iou(det.box, box)
            if overlap >= best_iou:
                best, best_iou = j, overlap
        if best >= 0:
            matched[det.image_id][best] = True
            tp[rank] = 1.0

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)

    # Μονότονη precision (envelope από δεξιά)
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])

    indices = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.array([precision[i] if i < len(precision) else 0.0 for i in indices])
    return float(np.mean(sampled))


def map_report(
    dets: Sequence[ScoredDetection],
    gt: Union[Mapping[int, Sequence[BBox]], Sequence[Sequence[BBox]]],
) -> MapResult:
    per_threshold = [average_precision(dets, gt, float(t)) for t in IOU_THRESHOLDS]
    return MapResult(map=float(np.mean(per_threshold)), ap50=per_threshold[0], per_threshold=per_threshold)


def coco_map(
    dets: Sequence[ScoredDetection],
    gt: Union[Mapping[int, Sequence[BBox]], Sequence[Sequence[BBox]]],
) -> float:
    """mAP@[.50:.95]: μέσος όρος του AP στα 10 IoU thresholds."""
    return map_report(dets, gt).map


def map_drop(map_clean: float, map_patched: float) -> float:
    """Πόσο έπεσε το mAP. Αρνητικό αν το patch βοήθησε τον detector."""
    return map_clean - map_patched


def embed_into_boxes(image: torch.Tensor, patch: Union[Patch, torch.Tensor], boxes: Sequence[BBox], scale: float) -> torch.Tensor:
    """
    Το patch στο κέντρο κάθε box, με τη σειρά των annotations.

    Boxes που δίνουν τετράγωνο μικρότερο από 1 px παραλείπονται.
    """
    if isinstance(patch, Patch):
        patch = patch.to_tensor(image.dtype)
    for box in boxes:
        placement = target_square(box, scale)
        if placement.side < 1:
            logger.warning(f"⚠️  Box {box.w:.1f}×{box.h:.1f} too small for a patch at scale {scale}, skipping")
            continue
        image = embed_patch(image, patch, placement).image
    return image


def dataset_map(
    adapter: DetectorAdapter,
    samples: Sequence[PreparedSample],
    params: EvalParams,
    patch: Optional[Patch] = None,
) -> MapResult:
    """mAP του adapter στα samples, με ή χωρίς patch."""
    patch_tensor = patch.to_tensor() if patch is not None else None
    dets: List[ScoredDetection] = []
    for image_id, sample in enumerate(samples):
        image = sample.image
        if patch_tensor is not None:
            image = embed_into_boxes(image, patch_tensor, sample.boxes, params.placement_scale)
        for d in adapter.detect(image, params.conf_thresh, params.iou_thresh):
            dets.append(ScoredDetection(image_id=image_id, box=d.box, score=d.score))
    return map_report(dets, [s.boxes for s in samples])


def patch_set_label(patches: Sequence[Patch]) -> str:
    kinds = {p.meta.kind for p in patches}
    if kinds == {PatchKind.UNIFORM_NOISE}:
        return NOISE_LABEL
    if kinds == {PatchKind.GRAYSCALE}:
        levels = sorted({p.meta.gray_level for p in patches})
        return ",".join(gray_label(level) for level in levels)
    sources = {p.meta.source_model for p in patches}
    return sources.pop() if len(sources) == 1 else "mixed"


def group_patch_sets(patches: Sequence[Patch]) -> Dict[str, List[Patch]]:
    """
    Χωρίζει patches σε sets: ένα ανά source, ένα για noise, ένα ανά γκρι επίπεδο.

    Η σειρά των sets είναι η σειρά εμφάνισης.
    """
    groups: Dict[str, List[Patch]] = {}
    for patch in patches:
        if patch.meta.kind == PatchKind.GRAYSCALE:
            key = gray_label(patch.meta.gray_level)
        elif patch.meta.kind == PatchKind.UNIFORM_NOISE:
            key = NOISE_LABEL
        else:
            key = patch.meta.source_model
        groups.setdefault(key, []).append(patch)
    return groups


def write_eval_records(records: Sequence[EvalRecord], path: Union[str, Path]) -> Path:
    """Ένα record ανά γραμμή, sorted keys."""
    path = Path(path)
    lines = [json.dumps(r.model_dump(mode="json"), sort_keys=True) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    logger.info(f"💾 Wrote {len(records)} eval records to {path}")
    return path


def read_eval_records(path: Union[str, Path]) -> List[EvalRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Eval records not found: {path}")
    records = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(EvalRecord.model_validate_json(line))
        except ValidationError as e:
            raise InvalidArgumentError(f"{path}:{line_no}: invalid eval record ({e.error_count()} errors)") from e
    return records


def evaluate_patch_set(
    adapter: DetectorAdapter,
    dataset: AnnotatedDataset,
    patches: Sequence[Patch],
    placement_scale: Optional[float] = None,
    params: Optional[EvalParams] = None,
    patch_set_id: Optional[str] = None,
    samples: Optional[Sequence[PreparedSample]] = None,
    clean: Optional[MapResult] = None,
) -> EvalRecord:
    """
    Clean vs patched mAP για ένα patch set.

    Args:
        adapter: Ο detector
        dataset: Το dataset (δεν αλλάζει)
        patches: Τουλάχιστον ένα patch
        placement_scale: Αν δοθεί, αντικαθιστά το params.placement_scale
        samples / clean: Προϋπολογισμένα (το compatibility matrix τα ξαναχρησιμοποιεί)
    """
    if not patches:
        raise InvalidArgumentError("patch set is empty")
    params = params or EvalParams()
    if placement_scale is not None:
        params = params.model_copy(update={"placement_scale": placement_scale})
    if samples is None:
        samples = prepare_samples(dataset, adapter.input_size)
    if sum(len(s.boxes) for s in samples) == 0:
        raise InvalidArgumentError(f"dataset '{dataset.id}' has no ground truth boxes")

    clean = clean or dataset_map(adapter, samples, params)
    patched = [dataset_map(adapter, samples, params, patch) for patch in patches]

    per_patch_drops = [map_drop(clean.map, result.map) for result in patched]
    map_patched = float(np.mean([result.map for result in patched]))
    drop = float(np.mean(per_patch_drops))
    return EvalRecord(
        model=adapter.name,
        patch_set_id=patch_set_id or patch_set_label(patches),
        dataset_id=dataset.id,
        map_clean=clean.map,
        map_patched=map_patched,
        map_drop=drop,
        per_patch_drops=per_patch_drops,
        patch_ids=[p.patch_id for p in patches],
        ap50_clean=clean.ap50,
        ap50_patched=float(np.mean([result.ap50 for result in patched])),
        map_drop_normalized=drop / clean.map if clean.map > 0 else 0.0,
    )


def grayscale_sweep(
    adapter: DetectorAdapter,
    dataset: AnnotatedDataset,
    levels: Sequence[float],
    params: Optional[EvalParams] = None,
) -> List[Tuple[float, float]]:
    """(level, drop) για κάθε γκρι επίπεδο, με τη σειρά που δόθηκαν (και διπλότυπα)."""
    if not levels:
        raise InvalidArgumentError("grayscale sweep needs at least one level")
    params = params or EvalParams()
    samples = prepare_samples(dataset, adapter.input_size)
    clean = dataset_map(adapter, samples, params)

    results = []
    for level in levels:
        patch = baseline_patch(PatchKind.GRAYSCALE, level=level, height=params.patch_size, width=params.patch_size)
        record = evaluate_patch_set(adapter, dataset, [patch], params=params, samples=samples, clean=clean)
        results.append((float(level), record.map_drop))
    return results


def baseline_columns(params: EvalParams) -> Dict[str, List[Patch]]:
    """Ένα noise column και ένα column ανά γκρι επίπεδο."""
    size = params.patch_size
    columns = {
        NOISE_LABEL: [
            baseline_patch(PatchKind.UNIFORM_NOISE, seed=params.noise_seed + i, height=size, width=size)
            for i in range(params.noise_count)
        ]
    }
    for level in params.gray_levels:
        if gray_label(level) in columns:
            continue
        columns[gray_label(level)] = [baseline_patch(PatchKind.GRAYSCALE, level=level, height=size, width=size)]
    return columns


def compatibility_matrix(
    patch_sets: Mapping[str, Sequence[Patch]],
    adapters: Mapping[str, Optional[DetectorAdapter]],
    dataset: AnnotatedDataset,
    params: Optional[EvalParams] = None,
    jobs: int = 1,
) -> CompatibilityMatrix:
    """
    Mean mAP drop για κάθε (evaluator, source).

    Args:
        patch_sets: source → patches (η σειρά ορίζει τις στήλες)
        adapters: evaluator name → adapter, ή None αν δεν φορτώθηκε
        dataset: Κοινό dataset για όλους
        params: Thresholds, placement και baselines
        jobs: Πόσα (evaluator, column) ζεύγη τρέχουν παράλληλα

    Κελιά που αποτυγχάνουν γίνονται None και δεν μπαίνουν στο rowwise mean.
    """
    params = params or EvalParams()
    for source, patches in patch_sets.items():
        if not patches:
            raise InvalidArgumentError(f"patch set '{source}' is empty")

    baselines = baseline_columns(params)
    columns: Dict[str, Sequence[Patch]] = {**baselines, **patch_sets}
    if len(columns) != len(baselines) + len(patch_sets):
        raise InvalidArgumentError("source names must not collide with baseline column names")
    labels = list(columns)

    failures: List[str] = []
    prepared: Dict[str, Tuple[List[PreparedSample], MapResult]] = {}
    for name, adapter in adapters.items():
        if adapter is None:
            failures.append(f"{name}: adapter unavailable")
            logger.warning(f"⚠️  Adapter '{name}' is unavailable, its row will be missing")
            continue
        try:
            samples = prepare_samples(dataset, adapter.input_size)
            prepared[name] = (samples, dataset_map(adapter, samples, params))
        except (PatchBenchError, RuntimeError, ValueError, ConnectionError) as e:
            failures.append(f"{name}: {e}")
            logger.warning(f"⚠️  Clean evaluation failed for '{name}': {e}")

    def run_cell(key: Tuple[str, str]) -> Tuple[Tuple[str, str], Union[EvalRecord, Exception]]:
        name, label = key
        samples, clean = prepared[name]
        try:
            record = evaluate_patch_set(
                adapters[name], dataset, columns[label], params=params,
                patch_set_id=label, samples=samples, clean=clean,
            )
            return key, record
        except (PatchBenchError, RuntimeError, ValueError, ConnectionError) as e:
            return key, e

    tasks = [(name, label) for name in prepared for label in labels]
    logger.info(f"🔄 Evaluating {len(tasks)} cells ({len(prepared)} evaluators × {len(labels)} columns, jobs={jobs})")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = dict(pool.map(run_cell, tasks))
    else:
        outcomes = dict(run_cell(task) for task in tasks)

    cells: List[List[Optional[float]]] = []
    rowwise: List[Optional[float]] = []
    records: List[EvalRecord] = []
    for name in adapters:
        row: List[Optional[float]] = []
        for label in labels:
            outcome = outcomes.get((name, label))
            if isinstance(outcome, EvalRecord):
                row.append(outcome.map_drop)
                records.append(outcome)
            else:
                if isinstance(outcome, Exception):
                    failures.append(f"{name}/{label}: {outcome}")
                    logger.warning(f"⚠️  Cell {name}/{label} failed: {outcome}")
                row.append(None)
        sources = [v for label, v in zip(labels, row) if label in patch_sets and v is not None]
        rowwise.append(float(np.mean(sources)) if sources else None)
        cells.append(row)

    return CompatibilityMatrix(
        eval_labels=list(adapters),
        baseline_labels=list(baselines),
        source_labels=list(patch_sets),
        cells=cells,
        rowwise_mean=rowwise,
        failures=failures,
        records=records,
    )

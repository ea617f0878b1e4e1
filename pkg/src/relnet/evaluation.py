"""Box geometry, ground-truth matching, and Rec@K for the three task
settings: predicate detection (pairs given), phrase detection (label
triple plus union-box IoU >= 0.5), relationship detection (label triple
plus both individual IoUs >= 0.5).

Matching is greedy in rank order: each prediction consumes the first
still-unmatched eligible ground truth in annotation order, each ground
truth at most once.  Predicate-detection Rec@K comes in two flavours: the
default pools every pair's scored predicates into one per-image list; the
per-pair variant applies k to each pair's own ranking and is what the
per-type table uses (k = 5).
"""

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .dataset import Box, PredicateVocabulary, Triplet
from .inference import PredictionItem

IOU_THRESHOLD = 0.5
_PAIR_EQ_TOL = 1e-9  # boxes of the same gt pair compare exactly; tolerance is slack


class Task(Enum):
    PREDICATE = "predicate"
    PHRASE = "phrase"
    RELATIONSHIP = "relationship"


POOLED_PER_IMAGE = "pooled_per_image"
PER_PAIR = "per_pair"


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 when disjoint."""
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def union_box(a: Box, b: Box) -> Box:
    """Tight axis-aligned cover of both boxes."""
    x0 = min(a.x, b.x)
    y0 = min(a.y, b.y)
    x1 = max(a.x + a.w, b.x + b.w)
    y1 = max(a.y + a.h, b.y + b.h)
    return Box(x0, y0, x1 - x0, y1 - y0)


def _same_box(a: Box, b: Box) -> bool:
    return (abs(a.x - b.x) <= _PAIR_EQ_TOL and abs(a.y - b.y) <= _PAIR_EQ_TOL
            and abs(a.w - b.w) <= _PAIR_EQ_TOL and abs(a.h - b.h) <= _PAIR_EQ_TOL)


def matches(pred: PredictionItem, gt: Triplet, mode: Task,
            iou_threshold: float = IOU_THRESHOLD) -> bool:
    """Whether a prediction counts as detecting this ground truth.

    Predicate mode assumes predictions built on ground-truth pairs, so a
    match requires the same pair (labels and boxes) with the right
    predicate.  Phrase mode checks the label triple and the union boxes;
    relationship mode checks the label triple and both individual boxes.
    """
    if mode is Task.PREDICATE:
        return (pred.predicate == gt.predicate
                and pred.subject_label == gt.subject_label
                and pred.object_label == gt.object_label
                and _same_box(pred.subject_box, gt.subject_box)
                and _same_box(pred.object_box, gt.object_box))
    triple_ok = (pred.subject_label == gt.subject_label
                 and pred.predicate == gt.predicate
                 and pred.object_label == gt.object_label)
    if not triple_ok:
        return False
    if mode is Task.PHRASE:
        return iou(union_box(pred.subject_box, pred.object_box),
                   union_box(gt.subject_box, gt.object_box)) >= iou_threshold
    if mode is Task.RELATIONSHIP:
        return (iou(pred.subject_box, gt.subject_box) >= iou_threshold
                and iou(pred.object_box, gt.object_box) >= iou_threshold)
    raise ValueError(f"unknown task mode {mode!r}")


@dataclass
class RecallReport:
    mode: Task
    k: int
    recall: float
    num_gt: int
    num_matched: int
    per_type: dict[str, tuple[float, int]] = field(default_factory=dict)
    gt_empty: bool = False
    pooling: str | None = None
    zero_shot: bool = False

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "k": self.k,
            "recall": self.recall,
            "num_gt": self.num_gt,
            "num_matched": self.num_matched,
            "per_type": {name: {"recall": r, "gt_count": c}
                         for name, (r, c) in self.per_type.items()},
            "gt_empty": self.gt_empty,
            "pooling": self.pooling,
            "zero_shot": self.zero_shot,
        }


def _type_name(pred_index: int, vocab: PredicateVocabulary | None) -> str:
    if vocab is not None:
        return vocab.names[pred_index]
    return str(pred_index)


def _finish_report(mode: Task, k: int, matched_per_type: dict[int, int],
                   total_per_type: dict[int, int], vocab: PredicateVocabulary | None,
                   pooling: str | None = None, zero_shot: bool = False) -> RecallReport:
    num_gt = sum(total_per_type.values())
    num_matched = sum(matched_per_type.values())
    per_type = {
        _type_name(p, vocab): (matched_per_type.get(p, 0) / total, total)
        for p, total in sorted(total_per_type.items())
    }
    return RecallReport(
        mode=mode, k=k,
        recall=(num_matched / num_gt) if num_gt else 0.0,
        num_gt=num_gt, num_matched=num_matched, per_type=per_type,
        gt_empty=num_gt == 0, pooling=pooling, zero_shot=zero_shot,
    )


def recall_at_k(predictions: Mapping[str, Sequence[PredictionItem]],
                gts: Mapping[str, Sequence[Triplet]], k: int, mode: Task,
                iou_threshold: float = IOU_THRESHOLD,
                vocab: PredicateVocabulary | None = None,
                zero_shot: bool = False) -> RecallReport:
    """Greedy top-k matching pooled over all images.

    ``predictions`` maps image id to a score-descending list; images with
    ground truth but no predictions simply contribute misses.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    matched_per_type: dict[int, int] = {}
    total_per_type: dict[int, int] = {}
    for image_id, gt_list in gts.items():
        for t in gt_list:
            total_per_type[t.predicate] = total_per_type.get(t.predicate, 0) + 1
        preds = list(predictions.get(image_id, ()))
        scores = [p.score for p in preds]
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            raise ValueError(f"image {image_id!r}: predictions are not sorted by score")
        taken = [False] * len(gt_list)
        for pred in preds[:k]:
            for gi, gt in enumerate(gt_list):
                if taken[gi]:
                    continue
                if matches(pred, gt, mode, iou_threshold):
                    taken[gi] = True
                    matched_per_type[gt.predicate] = matched_per_type.get(gt.predicate, 0) + 1
                    break
    return _finish_report(mode, k, matched_per_type, total_per_type, vocab,
                          pooling=POOLED_PER_IMAGE if mode is Task.PREDICATE else None,
                          zero_shot=zero_shot)


def predicate_recall_per_pair(per_pair_preds: Mapping[str, Sequence[Sequence[tuple[int, float]]]],
                              gts: Mapping[str, Sequence[Triplet]], k: int,
                              vocab: PredicateVocabulary | None = None,
                              restrict_types: set[tuple[int, int, int]] | None = None,
                              zero_shot: bool = False) -> RecallReport:
    """Per-pair predicate detection: a ground truth counts as matched when
    its predicate appears in the top k of its own pair's ranking.

    ``per_pair_preds[image_id][i]`` is the ranked (predicate, score) list
    for ``gts[image_id][i]``.  ``restrict_types`` limits scoring to ground
    truths of the given (subject, predicate, object) types without
    touching the predictions.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    matched_per_type: dict[int, int] = {}
    total_per_type: dict[int, int] = {}
    for image_id, gt_list in gts.items():
        ranked_lists = per_pair_preds.get(image_id, ())
        if len(ranked_lists) != len(gt_list):
            raise ValueError(
                f"image {image_id!r}: {len(ranked_lists)} rankings for {len(gt_list)} pairs"
            )
        for gt, ranked in zip(gt_list, ranked_lists):
            if restrict_types is not None and gt.type_key() not in restrict_types:
                continue
            total_per_type[gt.predicate] = total_per_type.get(gt.predicate, 0) + 1
            if any(p == gt.predicate for p, _ in ranked[:k]):
                matched_per_type[gt.predicate] = matched_per_type.get(gt.predicate, 0) + 1
    return _finish_report(Task.PREDICATE, k, matched_per_type, total_per_type, vocab,
                          pooling=PER_PAIR, zero_shot=zero_shot)


def per_type_accuracy(per_pair_preds: Mapping[str, Sequence[Sequence[tuple[int, float]]]],
                      gts: Mapping[str, Sequence[Triplet]], k: int = 5,
                      vocab: PredicateVocabulary | None = None) -> dict[str, tuple[float, int]]:
    """Per-predicate-type Rec@k over ground-truth pairs (k per pair)."""
    return predicate_recall_per_pair(per_pair_preds, gts, k, vocab).per_type


def group_zero_shot(zero_shot_gts: Sequence[tuple[str, Triplet]]) -> dict[str, list[Triplet]]:
    grouped: dict[str, list[Triplet]] = {}
    for image_id, t in zero_shot_gts:
        grouped.setdefault(image_id, []).append(t)
    return grouped


def zero_shot_recall(predictions: Mapping[str, Sequence[PredictionItem]],
                     zero_shot_gts: Sequence[tuple[str, Triplet]], k: int, mode: Task,
                     iou_threshold: float = IOU_THRESHOLD,
                     vocab: PredicateVocabulary | None = None) -> RecallReport:
    """recall_at_k with ground truth restricted to the zero-shot instances.

    Predictions are passed through unfiltered; an empty zero-shot set
    yields recall 0 with ``gt_empty`` set.
    """
    report = recall_at_k(predictions, group_zero_shot(zero_shot_gts), k, mode,
                         iou_threshold, vocab, zero_shot=True)
    return report


def write_recall_csv(reports: Sequence[RecallReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "k", "recall", "num_gt", "num_matched"])
        for r in reports:
            writer.writerow([r.mode.value, r.k, repr(r.recall), r.num_gt, r.num_matched])


def write_per_type_csv(per_type: Mapping[str, tuple[float, int]], path: str | Path,
                       k: int = 5) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["predicate", f"rec_at_{k}", "gt_count"])
        for name, (recall, count) in per_type.items():
            writer.writerow([name, repr(recall), count])


def write_recall_json(reports: Sequence[RecallReport], path: str | Path,
                      meta: dict | None = None) -> None:
    payload = {"reports": [r.to_json_dict() for r in reports]}
    if meta:
        payload.update(meta)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)

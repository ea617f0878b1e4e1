"""Joint recognition: detector class probabilities times predicate
probabilities, over all ordered pairs of distinct detections.

Each detection contributes its argmax class (over the N real classes) and
that class's probability; the no-relation output competes inside the
softmax but is never emitted as a prediction.  Ranking is deterministic:
score descending, ties broken by (subject index, object index, predicate)
ascending.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import brnn
from .brnn import BrnnParams
from .dataset import Box, ImageRecord, build_spatial_input
from .embeddings import EmbeddingTable, lookup_class_vector


@dataclass(frozen=True)
class PredictionItem:
    """One scored (subject, predicate, object) candidate.

    ``subject_det``/``object_det`` index the list the pair came from:
    detections for detector-driven candidates, gt_objects for
    ground-truth-pair candidates.
    """

    subject_det: int
    subject_label: int
    predicate: int
    object_det: int
    object_label: int
    score: float
    subject_box: Box
    object_box: Box

    def __post_init__(self):
        if self.subject_det == self.object_det:
            raise ValueError("a relationship needs two distinct participants")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def joint_score(p_subject: float, p_predicate: float, p_object: float) -> float:
    """Product of the three probabilities."""
    for name, v in (("subject", p_subject), ("predicate", p_predicate), ("object", p_object)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} probability {v} outside [0, 1]")
    return p_subject * p_predicate * p_object


def _pair_probs(params: BrnnParams, table: EmbeddingTable, object_vocab: list[str],
                pairs: list[tuple[int, Box, int, Box]],
                oov_policy: str = "error") -> np.ndarray:
    """Predicate distributions for (subject_label, s_box, object_label, o_box) pairs."""
    dim = params.w_xh_l1.shape[2]
    vecs: dict[int, np.ndarray] = {}
    for s_label, _, o_label, _ in pairs:
        for label in (s_label, o_label):
            if label not in vecs:
                vecs[label] = lookup_class_vector(table, object_vocab[label], oov_policy)
    xs = np.stack([
        np.stack([vecs[s_label], build_spatial_input(s_box, o_box, dim), vecs[o_label]])
        for s_label, s_box, o_label, o_box in pairs
    ])
    return brnn.forward_batch(params, xs).probs


def predict_predicate(params: BrnnParams, table: EmbeddingTable,
                      subject_class: str, subject_box: Box,
                      object_class: str, object_box: Box,
                      oov_policy: str = "error") -> np.ndarray:
    """p(r | subject, object) over the K+1 outputs, no-relation last."""
    dim = params.w_xh_l1.shape[2]
    x1 = lookup_class_vector(table, subject_class, oov_policy)
    x2 = build_spatial_input(subject_box, object_box, dim)
    x3 = lookup_class_vector(table, object_class, oov_policy)
    return brnn.forward(params, x1, x2, x3).probs


def predict_for_gt_pairs(record: ImageRecord, params: BrnnParams, table: EmbeddingTable,
                         object_vocab: list[str],
                         top_k_per_pair: int | None = None) -> list[list[tuple[int, float]]]:
    """Ranked real predicates for every ground-truth triplet's pair.

    One list per gt_triplet, sorted by probability descending with ties
    broken by predicate index; no-relation is excluded from the ranking
    but still competes in the softmax.
    """
    if not record.gt_triplets:
        return []
    pairs = [(t.subject_label, t.subject_box, t.object_label, t.object_box)
             for t in record.gt_triplets]
    probs = _pair_probs(params, table, object_vocab, pairs)
    n_real = probs.shape[1] - 1
    ranked_lists = []
    for row in probs:
        order = np.lexsort((np.arange(n_real), -row[:n_real]))
        ranked = [(int(r), float(row[r])) for r in order]
        if top_k_per_pair is not None:
            ranked = ranked[:top_k_per_pair]
        ranked_lists.append(ranked)
    return ranked_lists


def gt_pair_items(record: ImageRecord, params: BrnnParams, table: EmbeddingTable,
                  object_vocab: list[str]) -> list[PredictionItem]:
    """All ground-truth pairs' predicate candidates pooled into one ranked list.

    The score is the predicate probability alone (boxes and labels are
    given, so the detector factors are 1).
    """
    if not record.gt_triplets:
        return []
    seen_pairs: dict[tuple[int, int], Box] = {}
    pairs = []
    pair_keys = []
    for t in record.gt_triplets:
        key = (t.subject_idx, t.object_idx)
        if key in seen_pairs:
            continue
        seen_pairs[key] = t.subject_box
        pairs.append((t.subject_label, t.subject_box, t.object_label, t.object_box))
        pair_keys.append((key, t))
    probs = _pair_probs(params, table, object_vocab, pairs)
    n_real = probs.shape[1] - 1
    items = []
    for (key, t), row in zip(pair_keys, probs):
        for r in range(n_real):
            items.append(PredictionItem(
                subject_det=t.subject_idx, subject_label=t.subject_label,
                predicate=r, object_det=t.object_idx, object_label=t.object_label,
                score=float(row[r]), subject_box=t.subject_box, object_box=t.object_box,
            ))
    items.sort(key=lambda it: (-it.score, it.subject_det, it.object_det, it.predicate))
    return items


def rank_relationships(record: ImageRecord, params: BrnnParams, table: EmbeddingTable,
                       object_vocab: list[str], top_k: int,
                       det_threshold: float = 0.0) -> list[PredictionItem]:
    """Top-k joint-scored candidates over ordered pairs of distinct detections.

    Pairs are drawn from detections whose argmax-class score is at least
    det_threshold; every real predicate of every pair is a candidate.
    """
    if top_k < 1:
        raise ValueError("top_k must be positive")
    eligible = [(i, det) for i, det in enumerate(record.detections)
                if det.score >= det_threshold]
    if len(eligible) < 2:
        return []
    pair_meta = []
    pairs = []
    for i, det_i in eligible:
        for j, det_j in eligible:
            if i == j:
                continue
            pair_meta.append((i, det_i, j, det_j))
            pairs.append((det_i.label, det_i.box, det_j.label, det_j.box))
    probs = _pair_probs(params, table, object_vocab, pairs)
    n_real = probs.shape[1] - 1

    n_pairs = len(pairs)
    scores = np.empty(n_pairs * n_real)
    s_idx = np.empty(n_pairs * n_real, dtype=np.int64)
    o_idx = np.empty(n_pairs * n_real, dtype=np.int64)
    preds = np.tile(np.arange(n_real), n_pairs)
    for p, (i, det_i, j, det_j) in enumerate(pair_meta):
        base = p * n_real
        scores[base:base + n_real] = det_i.score * probs[p, :n_real] * det_j.score
        s_idx[base:base + n_real] = i
        o_idx[base:base + n_real] = j
    order = np.lexsort((preds, o_idx, s_idx, -scores))[:top_k]

    items = []
    for c in order:
        p = int(c) // n_real
        i, det_i, j, det_j = pair_meta[p]
        items.append(PredictionItem(
            subject_det=i, subject_label=det_i.label, predicate=int(preds[c]),
            object_det=j, object_label=det_j.label, score=float(scores[c]),
            subject_box=det_i.box, object_box=det_j.box,
        ))
    return items


def save_predictions(per_image: dict[str, list[PredictionItem]], path: str | Path) -> None:
    """Prediction dump consumed by the evaluator and external graders."""
    data = []
    for image_id, items in per_image.items():
        data.append({
            "image_id": image_id,
            "items": [
                {
                    "s_det": it.subject_det, "s_class": it.subject_label,
                    "p": it.predicate, "o_det": it.object_det,
                    "o_class": it.object_label, "score": it.score,
                    "s_box": list(it.subject_box.coords()),
                    "o_box": list(it.object_box.coords()),
                }
                for it in items
            ],
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh)

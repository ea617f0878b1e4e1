"""Annotation ingestion and training-pair construction.

Boxes are stored normalized: upper-left corner (x, y) and size (w, h), all
divided by the image extent.  Ground-truth triplets reference the image's
object list by index and also carry the resolved labels and boxes so the
evaluator can treat them as self-contained.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DegenerateBoxError, ParseError, VocabularyError

log = logging.getLogger(__name__)

SPATIAL_DIM = 300  # width of the box-pair input at the default embedding size
BOX_EDGE_TOL = 1e-6


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, normalized to the unit square."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"corner ({self.x}, {self.y}) outside the unit square")
        if self.w <= 0.0 or self.h <= 0.0:
            raise ValueError(f"non-positive size ({self.w}, {self.h})")
        if self.x + self.w > 1.0 + BOX_EDGE_TOL or self.y + self.h > 1.0 + BOX_EDGE_TOL:
            raise ValueError(f"box ({self.x}, {self.y}, {self.w}, {self.h}) exceeds the unit square")

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True, eq=False)
class DetectedObject:
    """One detector output: a box plus class probabilities over N+1 classes
    (index N is background). The label is the argmax over the N real classes."""

    box: Box
    class_probs: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, DetectedObject):
            return NotImplemented
        return self.box == other.box and np.array_equal(self.class_probs, other.class_probs)

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=np.float64)
        object.__setattr__(self, "class_probs", probs)
        if probs.ndim != 1 or probs.shape[0] < 2:
            raise ValueError("class_probs must be a vector over N real classes plus background")
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise ValueError("class probabilities must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > 1e-6:
            raise ValueError(f"class probabilities sum to {probs.sum()}, expected 1")

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_probs[:-1]))

    @property
    def score(self) -> float:
        return float(self.class_probs[self.label])


@dataclass(frozen=True)
class Triplet:
    """A ground-truth relationship: subject and object as gt_objects indices
    plus their resolved labels and boxes, and the predicate index."""

    subject_idx: int
    object_idx: int
    subject_label: int
    predicate: int
    object_label: int
    subject_box: Box
    object_box: Box

    def type_key(self) -> tuple[int, int, int]:
        return (self.subject_label, self.predicate, self.object_label)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    gt_objects: tuple[tuple[int, Box], ...]
    gt_triplets: tuple[Triplet, ...]
    detections: tuple[DetectedObject, ...] = ()

    def __post_init__(self):
        n = len(self.gt_objects)
        for t in self.gt_triplets:
            if not (0 <= t.subject_idx < n and 0 <= t.object_idx < n):
                raise ValueError(
                    f"image {self.image_id}: triplet references object "
                    f"({t.subject_idx}, {t.object_idx}) outside 0..{n - 1}"
                )


@dataclass(frozen=True)
class PredicateVocabulary:
    """K real predicate names; the implicit class K means no relation."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValueError("need at least one predicate")
        if len(set(self.names)) != len(self.names):
            raise ValueError("predicate names must be unique")
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def num_predicates(self) -> int:
        return len(self.names)

    @property
    def no_relation_index(self) -> int:
        return len(self.names)

    @property
    def output_dim(self) -> int:
        return len(self.names) + 1

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise VocabularyError(f"unknown predicate {name!r}") from None


def load_vocabulary(path: str | Path) -> list[str]:
    """One name per line; line order defines the indices."""
    names = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            name = line.rstrip("\n")
            if name:
                names.append(name)
    if not names:
        raise ParseError(f"{path}: empty vocabulary file")
    if len(set(names)) != len(names):
        raise ParseError(f"{path}: duplicate vocabulary entries")
    return names


def save_vocabulary(names, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in names:
            fh.write(name + "\n")


def normalize_box(px_box, img_w: int, img_h: int) -> Box:
    """Pixel (x_min, y_min, w, h) to a normalized Box.

    The rectangle is clamped to the image extent before division, matching
    common annotation noise; a box left without positive area is an error.
    """
    if img_w <= 0 or img_h <= 0:
        raise ValueError("image extent must be positive")
    x_min, y_min, w, h = (float(v) for v in px_box)
    if w <= 0 or h <= 0:
        raise DegenerateBoxError(f"non-positive pixel size ({w}, {h})")
    if 0.0 <= x_min and 0.0 <= y_min and x_min + w <= img_w and y_min + h <= img_h:
        # in-bounds: divide the raw extents so no corner arithmetic rounds
        return Box(x_min / img_w, y_min / img_h, w / img_w, h / img_h)
    x0 = min(max(x_min, 0.0), float(img_w))
    y0 = min(max(y_min, 0.0), float(img_h))
    x1 = min(max(x_min + w, 0.0), float(img_w))
    y1 = min(max(y_min + h, 0.0), float(img_h))
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise DegenerateBoxError(
            f"box ({x_min}, {y_min}, {w}, {h}) has no area inside a {img_w}x{img_h} image"
        )
    return Box(x0 / img_w, y0 / img_h, (x1 - x0) / img_w, (y1 - y0) / img_h)


def build_spatial_input(subject_box: Box, object_box: Box, dim: int = SPATIAL_DIM) -> np.ndarray:
    """Both boxes' (x, y, w, h) in the first 8 entries, zero-padded to dim."""
    if dim < 8:
        raise ValueError("spatial input needs at least 8 entries")
    out = np.zeros(dim)
    out[0:4] = subject_box.coords()
    out[4:8] = object_box.coords()
    return out


def _require(record: dict, key: str, image_id: str):
    if key not in record:
        raise ParseError(f"image {image_id!r}: missing field {key!r}")
    return record[key]


def load_annotations(path: str | Path, predicate_vocab: PredicateVocabulary,
                     object_vocab: list[str], min_short_edge: float = 0.0) -> list[ImageRecord]:
    """Read the annotation JSON into ImageRecords.

    ``min_short_edge`` optionally drops ground-truth objects whose shorter
    pixel edge is below the threshold (and any triplet touching them)
    before normalization.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, list):
        raise ParseError(f"{path}: top level must be an array of images")
    class_index = {name: i for i, name in enumerate(object_vocab)}
    records = []
    for entry in data:
        if not isinstance(entry, dict):
            raise ParseError(f"{path}: image entry is not an object")
        if "image_id" not in entry:
            raise ParseError(f"{path}: record {len(records)} is missing image_id")
        image_id = str(entry["image_id"])
        width = _require(entry, "width", image_id)
        height = _require(entry, "height", image_id)
        if not (isinstance(width, int) and isinstance(height, int) and width > 0 and height > 0):
            raise ParseError(f"image {image_id!r}: width/height must be positive integers")

        kept: list[tuple[int, Box]] = []
        remap: dict[int, int] = {}
        for i, obj in enumerate(_require(entry, "objects", image_id)):
            cls = _require(obj, "class", image_id)
            if cls not in class_index:
                raise VocabularyError(f"image {image_id!r}: unknown object class {cls!r}")
            px = _require(obj, "box", image_id)
            if len(px) != 4:
                raise ParseError(f"image {image_id!r}: object box must have 4 entries")
            if min_short_edge > 0.0 and min(float(px[2]), float(px[3])) < min_short_edge:
                continue
            try:
                box = normalize_box(px, width, height)
            except DegenerateBoxError as exc:
                raise ParseError(f"image {image_id!r}: {exc}") from exc
            remap[i] = len(kept)
            kept.append((class_index[cls], box))

        triplets = []
        for t in _require(entry, "triplets", image_id):
            s, o = _require(t, "s", image_id), _require(t, "o", image_id)
            pname = _require(t, "p", image_id)
            pred = predicate_vocab.index(pname)
            if s == o:
                raise ParseError(f"image {image_id!r}: triplet relates an object to itself")
            if s not in remap or o not in remap:
                if not (0 <= s < len(entry["objects"]) and 0 <= o < len(entry["objects"])):
                    raise ParseError(f"image {image_id!r}: triplet index out of range")
                continue  # participant removed by the short-edge filter
            si, oi = remap[s], remap[o]
            triplets.append(Triplet(
                subject_idx=si, object_idx=oi,
                subject_label=kept[si][0], predicate=pred, object_label=kept[oi][0],
                subject_box=kept[si][1], object_box=kept[oi][1],
            ))

        detections = []
        for det in entry.get("detections", ()):
            px = _require(det, "box", image_id)
            probs = np.asarray(_require(det, "probs", image_id), dtype=np.float64)
            if probs.shape[0] != len(object_vocab) + 1:
                raise ParseError(
                    f"image {image_id!r}: detection probabilities must have "
                    f"{len(object_vocab) + 1} entries, found {probs.shape[0]}"
                )
            try:
                box = normalize_box(px, width, height)
                detections.append(DetectedObject(box=box, class_probs=probs))
            except (DegenerateBoxError, ValueError) as exc:
                raise ParseError(f"image {image_id!r}: {exc}") from exc

        records.append(ImageRecord(
            image_id=image_id, width=width, height=height,
            gt_objects=tuple(kept), gt_triplets=tuple(triplets),
            detections=tuple(detections),
        ))
    return records


def save_annotations(records: list[ImageRecord], path: str | Path,
                     predicate_vocab: PredicateVocabulary, object_vocab: list[str]) -> None:
    """Inverse of load_annotations; boxes are written back in pixel space."""
    data = []
    for rec in records:
        objects = [
            {"class": object_vocab[label],
             "box": [b.x * rec.width, b.y * rec.height, b.w * rec.width, b.h * rec.height]}
            for label, b in rec.gt_objects
        ]
        triplets = [
            {"s": t.subject_idx, "p": predicate_vocab.names[t.predicate], "o": t.object_idx}
            for t in rec.gt_triplets
        ]
        entry = {
            "image_id": rec.image_id, "width": rec.width, "height": rec.height,
            "objects": objects, "triplets": triplets,
        }
        if rec.detections:
            entry["detections"] = [
                {"box": [d.box.x * rec.width, d.box.y * rec.height,
                         d.box.w * rec.width, d.box.h * rec.height],
                 "probs": list(d.class_probs)}
                for d in rec.detections
            ]
        data.append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh)


def derive_zero_shot_split(train: list[ImageRecord],
                           test: list[ImageRecord]) -> list[tuple[str, Triplet]]:
    """Test triplets whose (subject, predicate, object) type never occurs in training."""
    seen = {t.type_key() for rec in train for t in rec.gt_triplets}
    return [
        (rec.image_id, t)
        for rec in test
        for t in rec.gt_triplets
        if t.type_key() not in seen
    ]


@dataclass(frozen=True)
class TrainingExample:
    subject_class: int
    object_class: int
    spatial: np.ndarray
    target: int


class SampleResult(NamedTuple):
    examples: list[TrainingExample]
    negative_shortfall: int


def sample_training_pairs(record: ImageRecord, no_relation_index: int,
                          neg_ratio: float, rng: np.random.Generator,
                          spatial_dim: int = SPATIAL_DIM) -> SampleResult:
    """One positive per ground-truth triplet plus floor(neg_ratio * positives)
    no-relation negatives.

    Negatives are drawn uniformly without replacement from the ordered
    object pairs (i != j) carrying no annotated triplet; the shortfall
    counter reports how many were requested beyond the pool size.
    """
    if neg_ratio < 0:
        raise ValueError("neg_ratio must be >= 0")
    if not record.gt_objects:
        raise ValueError(f"image {record.image_id!r} has no ground-truth objects")
    examples = []
    for t in record.gt_triplets:
        examples.append(TrainingExample(
            subject_class=t.subject_label, object_class=t.object_label,
            spatial=build_spatial_input(t.subject_box, t.object_box, spatial_dim),
            target=t.predicate,
        ))
    wanted = int(neg_ratio * len(examples))
    shortfall = 0
    if wanted > 0:
        annotated = {(t.subject_idx, t.object_idx) for t in record.gt_triplets}
        n = len(record.gt_objects)
        pool = [(i, j) for i in range(n) for j in range(n)
                if i != j and (i, j) not in annotated]
        take = min(wanted, len(pool))
        shortfall = wanted - take
        if shortfall:
            log.warning("image %s: negative pool exhausted, %d short", record.image_id, shortfall)
        for k in rng.choice(len(pool), size=take, replace=False) if take else ():
            i, j = pool[k]
            examples.append(TrainingExample(
                subject_class=record.gt_objects[i][0],
                object_class=record.gt_objects[j][0],
                spatial=build_spatial_input(record.gt_objects[i][1], record.gt_objects[j][1], spatial_dim),
                target=no_relation_index,
            ))
    return SampleResult(examples, shortfall)

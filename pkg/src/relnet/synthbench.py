"""Deterministic synthetic worlds for desk-scale experiments.

A world plants an embedding space with linearly separable semantic groups
(orthogonal group centroids plus bounded noise) and a set of predicate
rules.  Each rule fixes a subject group, an object group and a spatial
pattern; predicates come in mirrored pairs (groups swapped, boxes
swapped) so subject/object order carries real signal.  A fraction of
(subject-class, predicate) rows is held out of the training images but
instantiated in the test images, giving a zero-shot split whose types
share their group-level rule with trained types.

Emitted files reuse the package's own annotation and embedding formats,
so the parsers get exercised end to end.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (Box, DetectedObject, ImageRecord, PredicateVocabulary,
                      Triplet, save_annotations, save_vocabulary)
from .embeddings import EmbeddingTable, save_embeddings
from .errors import GenerationError

DETECTION_EPS = 0.01  # probability mass spread off the true class

# spatial pattern slots: a coarse grid, far enough apart that jittered
# instances of different patterns stay distinguishable
_SLOT_POS = (0.06, 0.36, 0.66)
_SLOT_SIZE = 0.22
MAX_JITTER = 0.06


@dataclass(frozen=True)
class SynthConfig:
    num_groups: int = 6
    classes_per_group: int = 5
    num_predicates: int = 8
    dim: int = 12
    intra_group_spread: float = 0.08
    inter_group_separation: float = 1.0
    images_train: int = 160
    images_test: int = 40
    held_out_fraction: float = 0.2
    seed: int = 0
    jitter: float = 0.02
    num_base_patterns: int = 1
    triplets_per_image: int = 3
    mirror_boxes: bool = True
    image_size: int = 1024  # power of two, so pixel round-trips are exact

    def __post_init__(self):
        if self.num_groups < 2:
            raise ValueError("need at least two semantic groups")
        if self.classes_per_group < 1:
            raise ValueError("need at least one class per group")
        if self.num_predicates < 1:
            raise ValueError("need at least one predicate")
        if self.dim < 8:
            raise ValueError("dim must be >= 8 to hold the spatial coordinates")
        if self.dim < self.num_groups:
            raise ValueError("dim must be >= num_groups for orthogonal group centroids")
        if self.intra_group_spread <= 0:
            raise ValueError("intra_group_spread must be positive")
        if self.inter_group_separation <= 2 * self.intra_group_spread:
            raise ValueError("inter_group_separation must exceed twice the spread")
        if not 0.0 < self.held_out_fraction < 1.0:
            raise ValueError("held_out_fraction must lie in (0, 1)")
        if not 0.0 <= self.jitter <= MAX_JITTER:
            raise ValueError(f"jitter must lie in [0, {MAX_JITTER}]")
        if self.num_base_patterns < 1:
            raise ValueError("num_base_patterns must be >= 1")
        if self.triplets_per_image < 1 or self.images_train < 1 or self.images_test < 1:
            raise ValueError("image counts and triplets_per_image must be >= 1")
        if self.image_size < 2 or self.image_size & (self.image_size - 1):
            raise ValueError("image_size must be a power of two")


@dataclass(frozen=True)
class Rule:
    """Generative rule of one predicate: who relates to whom, and where."""

    subject_group: int
    object_group: int
    subject_box: Box
    object_box: Box
    mirror_of: int | None = None  # index of the predicate this one mirrors


@dataclass(frozen=True)
class World:
    config: SynthConfig
    table: EmbeddingTable
    predicate_vocab: PredicateVocabulary
    object_vocab: list[str]
    object_groups: list[int]  # group of each class, parallel to object_vocab
    train_records: list[ImageRecord]
    test_records: list[ImageRecord]
    zero_shot_types: set[tuple[int, int, int]]
    rules: list[Rule]
    mirror_pairs: list[tuple[int, int]]


def _slot_pairs(n: int) -> list[tuple[int, int]]:
    pairs = [(a, b) for a in range(9) for b in range(9) if a < b]
    if n > len(pairs):
        raise GenerationError(f"at most {len(pairs)} base patterns available, {n} requested")
    return pairs[:n]


def _slot_box(slot: int) -> Box:
    r, c = divmod(slot, 3)
    return Box(_SLOT_POS[c], _SLOT_POS[r], _SLOT_SIZE, _SLOT_SIZE)


def _balanced_couples(num_groups: int) -> list[tuple[int, int]]:
    """All unordered group pairs, greedily ordered to spread group usage."""
    remaining = [(a, (a + off) % num_groups)
                 for off in range(1, num_groups)
                 for a in range(num_groups)
                 if a < (a + off) % num_groups]
    usage = [0] * num_groups
    ordered = []
    while remaining:
        best = min(range(len(remaining)),
                   key=lambda i: (usage[remaining[i][0]] + usage[remaining[i][1]], i))
        a, b = remaining.pop(best)
        usage[a] += 1
        usage[b] += 1
        ordered.append((a, b))
    return ordered


def _build_rules(config: SynthConfig) -> tuple[list[Rule], list[tuple[int, int]]]:
    couples = _balanced_couples(config.num_groups)
    n_slots = math.ceil(config.num_predicates / 2)
    n_couples = len(couples)
    n_patterns = config.num_base_patterns
    if n_slots > n_couples * n_patterns:
        raise GenerationError(
            f"{config.num_predicates} predicates need {n_slots} distinct rules but only "
            f"{n_couples} group pairs x {n_patterns} patterns are available"
        )
    if n_slots > (n_couples * n_patterns) // math.gcd(n_couples, n_patterns):
        raise GenerationError(
            "couple/pattern cycling would repeat a (group pair, pattern) rule; "
            "increase num_base_patterns or num_groups"
        )
    patterns = _slot_pairs(n_patterns)
    rules: list[Rule] = []
    mirror_pairs: list[tuple[int, int]] = []
    for i in range(n_slots):
        a, b = couples[i % n_couples]
        sa, sb = patterns[i % n_patterns]
        fwd = len(rules)
        rules.append(Rule(subject_group=a, object_group=b,
                          subject_box=_slot_box(sa), object_box=_slot_box(sb)))
        if len(rules) < config.num_predicates:
            # with mirror_boxes the reversed predicate also swaps the box
            # layout; without it the boxes stay put and only the word order
            # separates the two directions
            back_sa, back_sb = (sb, sa) if config.mirror_boxes else (sa, sb)
            rules.append(Rule(subject_group=b, object_group=a,
                              subject_box=_slot_box(back_sa), object_box=_slot_box(back_sb),
                              mirror_of=fwd))
            mirror_pairs.append((fwd, fwd + 1))
    return rules[:config.num_predicates], mirror_pairs


def _ball_noise(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    return direction * radius * rng.uniform(0.0, 1.0) ** (1.0 / dim)


def _class_vectors(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    # centroid radius keeps spread/radius <= 1/3 so intra-group cosine
    # distances stay strictly below inter-group ones
    radius = max(config.inter_group_separation, 3.0 * config.intra_group_spread)
    n = config.num_groups * config.classes_per_group
    vectors = np.zeros((n, config.dim))
    for g in range(config.num_groups):
        centroid = np.zeros(config.dim)
        centroid[g] = radius
        for i in range(config.classes_per_group):
            vectors[g * config.classes_per_group + i] = (
                centroid + _ball_noise(rng, config.dim, config.intra_group_spread)
            )
    return vectors


def _jittered(box: Box, rng: np.random.Generator, jitter: float) -> Box:
    if jitter == 0.0:
        return box
    dx, dy, dw, dh = rng.uniform(-jitter, jitter, size=4)
    return Box(box.x + dx, box.y + dy, box.w + dw, box.h + dh)


def _make_records(kind: str, type_slots: list[tuple[int, int, int]],
                  rules: list[Rule], config: SynthConfig,
                  rng: np.random.Generator, with_detections: bool,
                  num_classes: int) -> list[ImageRecord]:
    tpi = config.triplets_per_image
    records = []
    for img_idx in range(0, len(type_slots), tpi):
        chunk = type_slots[img_idx:img_idx + tpi]
        objects: list[tuple[int, Box]] = []
        triplets: list[Triplet] = []
        for s_class, pred, o_class in chunk:
            rule = rules[pred]
            s_box = _jittered(rule.subject_box, rng, config.jitter)
            o_box = _jittered(rule.object_box, rng, config.jitter)
            si = len(objects)
            objects.append((s_class, s_box))
            objects.append((o_class, o_box))
            triplets.append(Triplet(
                subject_idx=si, object_idx=si + 1,
                subject_label=s_class, predicate=pred, object_label=o_class,
                subject_box=s_box, object_box=o_box,
            ))
        detections = ()
        if with_detections:
            detections = tuple(
                DetectedObject(box=box, class_probs=_detector_probs(label, num_classes))
                for label, box in objects
            )
        records.append(ImageRecord(
            image_id=f"{kind}_{img_idx // tpi:05d}",
            width=config.image_size, height=config.image_size,
            gt_objects=tuple(objects), gt_triplets=tuple(triplets),
            detections=detections,
        ))
    return records


def _detector_probs(label: int, num_classes: int) -> np.ndarray:
    probs = np.full(num_classes + 1, DETECTION_EPS / num_classes)
    probs[label] = 1.0 - DETECTION_EPS
    return probs


def generate_world(config: SynthConfig) -> World:
    """Build the embedding table, vocabularies, image records and the
    declared zero-shot type set, all pinned by the config seed."""
    rng = np.random.default_rng(config.seed)
    g, cpg = config.num_groups, config.classes_per_group

    rules, mirror_pairs = _build_rules(config)
    vectors = _class_vectors(config, rng)
    object_vocab = [f"g{gi}c{ci}" for gi in range(g) for ci in range(cpg)]
    object_groups = [gi for gi in range(g) for _ in range(cpg)]
    table = EmbeddingTable(config.dim, object_vocab, vectors)
    predicate_vocab = PredicateVocabulary(tuple(f"rel{r}" for r in range(len(rules))))

    # hold out whole (subject-class, predicate) rows so a zero-shot subject
    # was never seen with its predicate; group mates keep the rule trained
    held_rows = max(1, round(config.held_out_fraction * cpg))
    if held_rows >= cpg:
        raise GenerationError(
            f"holding {held_rows} of {cpg} subject classes per rule would leave "
            "no trained class pair for some rule"
        )
    trained_types: list[tuple[int, int, int]] = []
    held_types: list[tuple[int, int, int]] = []
    for pred, rule in enumerate(rules):
        subj_classes = [rule.subject_group * cpg + i for i in range(cpg)]
        obj_classes = [rule.object_group * cpg + i for i in range(cpg)]
        held = set(rng.choice(cpg, size=held_rows, replace=False).tolist())
        for i, s_class in enumerate(subj_classes):
            bucket = held_types if i in held else trained_types
            for o_class in obj_classes:
                bucket.append((s_class, pred, o_class))

    train_slots = config.images_train * config.triplets_per_image
    covered = list(trained_types)
    rng.shuffle(covered)
    covered = covered[:train_slots]
    train_types = list(covered)
    while len(train_types) < train_slots:
        train_types.append(covered[int(rng.integers(len(covered)))])
    rng.shuffle(train_types)

    test_slots = config.images_test * config.triplets_per_image
    if test_slots < len(held_types):
        raise GenerationError(
            f"{len(held_types)} held-out types need at least "
            f"{math.ceil(len(held_types) / config.triplets_per_image)} test images"
        )
    test_types = list(held_types)
    while len(test_types) < test_slots:
        test_types.append(covered[int(rng.integers(len(covered)))])
    rng.shuffle(test_types)

    num_classes = len(object_vocab)
    train_records = _make_records("train", train_types, rules, config, rng,
                                  with_detections=False, num_classes=num_classes)
    test_records = _make_records("test", test_types, rules, config, rng,
                                 with_detections=True, num_classes=num_classes)
    return World(
        config=config, table=table, predicate_vocab=predicate_vocab,
        object_vocab=object_vocab, object_groups=object_groups,
        train_records=train_records, test_records=test_records,
        zero_shot_types=set(held_types), rules=rules, mirror_pairs=mirror_pairs,
    )


def scrambled_table(world: World) -> EmbeddingTable:
    """Control embeddings with the group structure destroyed.

    Class i of group g takes the vector of the same-index class in group
    g + 1 + (i mod (G-1)), so the classes of any one group draw their
    vectors from several different groups; no rule's participants stay
    vector-coherent.  The token set and the vector set are unchanged.
    """
    g, cpg = world.config.num_groups, world.config.classes_per_group
    matrix = np.empty_like(world.table.matrix)
    for gi in range(g):
        for ci in range(cpg):
            src_group = (gi + 1 + (ci % (g - 1))) % g
            matrix[gi * cpg + ci] = world.table.matrix[src_group * cpg + ci]
    return EmbeddingTable(world.config.dim, list(world.table.tokens), matrix)


def write_world(world: World, outdir: str | Path) -> dict[str, Path]:
    """Emit the world in the package's own file formats."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "embeddings": outdir / "embeddings.txt",
        "objects": outdir / "objects.txt",
        "predicates": outdir / "predicates.txt",
        "train": outdir / "train.json",
        "test": outdir / "test.json",
        "zero_shot_types": outdir / "zero_shot_types.json",
    }
    save_embeddings(world.table, paths["embeddings"])
    save_vocabulary(world.object_vocab, paths["objects"])
    save_vocabulary(world.predicate_vocab.names, paths["predicates"])
    save_annotations(world.train_records, paths["train"], world.predicate_vocab, world.object_vocab)
    save_annotations(world.test_records, paths["test"], world.predicate_vocab, world.object_vocab)
    with open(paths["zero_shot_types"], "w", encoding="utf-8") as fh:
        json.dump(sorted(
            [world.object_vocab[s], world.predicate_vocab.names[p], world.object_vocab[o]]
            for s, p, o in world.zero_shot_types
        ), fh, indent=2)
    return paths

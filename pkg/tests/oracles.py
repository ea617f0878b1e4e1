"""Independent reference implementations used by several test modules."""

import numpy as np

from relnet.dataset import Box, Triplet
from relnet.evaluation import Task, matches
from relnet.inference import PredictionItem


def max_bipartite_matching(adjacency: list[list[int]]) -> int:
    """Exhaustive maximum matching size; adjacency[i] lists the ground
    truths prediction i may take. Only for tiny instances."""
    best = 0

    def extend(i: int, used: frozenset[int]) -> None:
        nonlocal best
        if i == len(adjacency):
            best = max(best, len(used))
            return
        extend(i + 1, used)
        for g in adjacency[i]:
            if g not in used:
                extend(i + 1, used | {g})

    extend(0, frozenset())
    return best


def random_matching_case(rng: np.random.Generator, mode: Task = Task.RELATIONSHIP):
    """A small random evaluation instance.

    Labels and boxes are drawn from tiny pools, so several predictions can
    be eligible for one ground truth and vice versa; both the
    greedy-equals-optimal regime and the contentious one occur.
    """
    def box() -> Box:
        x = float(rng.choice([0.0, 0.05, 0.4]))
        y = float(rng.choice([0.0, 0.05]))
        return Box(x, y, 0.3, 0.3)

    n_gt = int(rng.integers(1, 6))
    n_pred = int(rng.integers(1, 6))
    gts = [
        Triplet(subject_idx=2 * i, object_idx=2 * i + 1,
                subject_label=int(rng.integers(2)), predicate=int(rng.integers(2)),
                object_label=int(rng.integers(2)),
                subject_box=box(), object_box=box())
        for i in range(n_gt)
    ]
    scores = np.sort(rng.uniform(0.1, 1.0, size=n_pred))[::-1]
    preds = [
        PredictionItem(subject_det=0, subject_label=int(rng.integers(2)),
                       predicate=int(rng.integers(2)), object_det=1,
                       object_label=int(rng.integers(2)), score=float(scores[i]),
                       subject_box=box(), object_box=box())
        for i in range(n_pred)
    ]
    return preds, gts


def adjacency_for(preds, gts, mode: Task) -> list[list[int]]:
    return [[g for g, gt in enumerate(gts) if matches(p, gt, mode)] for p in preds]

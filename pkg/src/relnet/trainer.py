"""Mini-batch SGD with global-norm gradient clipping and JSON checkpoints.

Batches use the mean of per-example gradients so the learning rate does
not depend on the batch size; the last partial batch is kept.  Everything
is seeded: example sampling, the per-epoch shuffle, and the parameter
init all derive from the config seed, so a run is reproducible bit for
bit.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import brnn
from .brnn import BrnnParams, NetworkDims
from .dataset import ImageRecord, PredicateVocabulary, sample_training_pairs
from .embeddings import EmbeddingTable, lookup_class_vector
from .errors import (CheckpointCorruptError, CheckpointShapeError,
                     CheckpointVersionError, EmptyDatasetError, ShapeError)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.01
    batch_size: int = 128
    max_epochs: int = 100
    clip_norm: float = 5.0
    neg_ratio: float = 1.0
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.neg_ratio < 0:
            raise ValueError("neg_ratio must be >= 0")


@dataclass
class TrainingHistory:
    initial_loss: float
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    negative_shortfall: int = 0


def global_norm(grads: BrnnParams) -> float:
    total = 0.0
    for _, arr in grads.tensors():
        total += float(np.sum(arr * arr))
    return float(np.sqrt(total))


def clip_gradients(grads: BrnnParams, max_norm: float) -> BrnnParams:
    """Scale all tensors by max_norm / ||g|| when the global norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return BrnnParams(*(arr * scale for _, arr in grads.tensors()))


def sgd_step(params: BrnnParams, grads: BrnnParams, lr: float) -> BrnnParams:
    updated = []
    for (name, p), (_, g) in zip(params.tensors(), grads.tensors()):
        if p.shape != g.shape:
            raise ShapeError(f"{name}: parameter shape {p.shape} vs gradient shape {g.shape}")
        updated.append(p - lr * g)
    return BrnnParams(*updated)


def class_vector_matrix(table: EmbeddingTable, object_vocab: list[str],
                        oov_policy: str = "error") -> np.ndarray:
    """Resolve every object class name once; rows index the vocabulary."""
    return np.vstack([lookup_class_vector(table, name, oov_policy) for name in object_vocab])


def materialize_examples(records: list[ImageRecord], class_vectors: np.ndarray,
                         vocab: PredicateVocabulary, neg_ratio: float,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    """Stack sampled pairs into inputs (n, 3, D) and targets (n,)."""
    dim = class_vectors.shape[1]
    rows = []
    targets = []
    shortfall = 0
    for rec in records:
        if not rec.gt_objects:
            continue
        result = sample_training_pairs(rec, vocab.no_relation_index, neg_ratio, rng, spatial_dim=dim)
        shortfall += result.negative_shortfall
        for ex in result.examples:
            rows.append(np.stack([
                class_vectors[ex.subject_class], ex.spatial, class_vectors[ex.object_class],
            ]))
            targets.append(ex.target)
    if not rows:
        raise EmptyDatasetError("no training examples could be materialized")
    return np.stack(rows), np.asarray(targets, dtype=np.int64), shortfall


def _dataset_loss_and_accuracy(params: BrnnParams, xs: np.ndarray,
                               targets: np.ndarray) -> tuple[float, float]:
    trace = brnn.forward_batch(params, xs)
    losses = brnn.batch_losses(trace.probs, targets)
    accuracy = float(np.mean(np.argmax(trace.probs, axis=1) == targets))
    return float(np.mean(losses)), accuracy


def train(records: list[ImageRecord], table: EmbeddingTable, vocab: PredicateVocabulary,
          object_vocab: list[str], config: TrainingConfig,
          dims: NetworkDims | None = None) -> tuple[BrnnParams, TrainingHistory]:
    """Run SGD over examples sampled from the records.

    Returns the final parameters and the per-epoch history (mean training
    loss and whole-set predicate accuracy); ``history.initial_loss`` is the
    full-set loss before the first update.
    """
    if not records:
        raise EmptyDatasetError("no training records")
    if dims is None:
        dims = NetworkDims(input_dim=table.dim, output_dim=vocab.output_dim)
    if dims.input_dim != table.dim:
        raise ShapeError(f"network input width {dims.input_dim} != embedding dim {table.dim}")
    if dims.output_dim != vocab.output_dim:
        raise ShapeError(
            f"network output width {dims.output_dim} != {vocab.output_dim} predicate classes"
        )

    rng = np.random.default_rng(config.seed)
    class_vectors = class_vector_matrix(table, object_vocab)
    xs, targets, shortfall = materialize_examples(records, class_vectors, vocab,
                                                  config.neg_ratio, rng)
    n = xs.shape[0]
    params = brnn.init_params(dims, config.seed)
    initial_loss, _ = _dataset_loss_and_accuracy(params, xs, targets)
    history = TrainingHistory(initial_loss=initial_loss, negative_shortfall=shortfall)
    log.info("training on %d examples (%d records), initial loss %.4f", n, len(records), initial_loss)

    for epoch in range(config.max_epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        epoch_loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = xs[idx]
            tb = targets[idx]
            trace = brnn.forward_batch(params, xb)
            losses = brnn.batch_losses(trace.probs, tb)
            epoch_loss_sum += float(np.sum(losses))
            dlogits = trace.probs.copy()
            dlogits[np.arange(len(tb)), tb] -= 1.0
            dlogits /= len(tb)
            grads = brnn.backward_batch(params, trace, dlogits)
            grads = clip_gradients(grads, config.clip_norm)
            params = sgd_step(params, grads, config.learning_rate)
        history.losses.append(epoch_loss_sum / n)
        _, accuracy = _dataset_loss_and_accuracy(params, xs, targets)
        history.accuracies.append(accuracy)
    return params, history


def save_checkpoint(params: BrnnParams, dims: NetworkDims,
                    vocab: PredicateVocabulary, path: str | Path) -> None:
    """JSON checkpoint; floats are written with repr so reload is bit-exact."""
    params.validate()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "dims": {
            "D": dims.input_dim,
            "H": dims.hidden_dim,
            "L": dims.num_layers,
            "output_dim": dims.output_dim,
        },
        "predicate_names": list(vocab.names),
        "tensors": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for name, arr in params.tensors()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str | Path) -> tuple[BrnnParams, NetworkDims, PredicateVocabulary]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict):
        raise CheckpointCorruptError(f"{path}: checkpoint is not a JSON object")
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version!r}, supported {CHECKPOINT_VERSION}"
        )
    try:
        d = payload["dims"]
        dims = NetworkDims(input_dim=d["D"], hidden_dim=d["H"],
                           output_dim=d["output_dim"], num_layers=d["L"])
        names = payload["predicate_names"]
        tensors = payload["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"{path}: malformed checkpoint ({exc})") from exc
    vocab = PredicateVocabulary(tuple(names))
    if vocab.output_dim != dims.output_dim:
        raise CheckpointShapeError(
            f"{path}: {vocab.output_dim} predicate classes vs output width {dims.output_dim}"
        )
    expected = brnn.field_shapes(dims)
    if set(tensors) != set(expected):
        raise CheckpointCorruptError(
            f"{path}: tensor set {sorted(tensors)} != expected {sorted(expected)}"
        )
    values = {}
    for name, spec in tensors.items():
        try:
            shape = tuple(spec["shape"])
            data = np.asarray(spec["data"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointCorruptError(f"{path}: malformed tensor {name!r} ({exc})") from exc
        if shape != expected[name]:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {shape}, expected {expected[name]}"
            )
        if data.size != int(np.prod(shape)):
            raise CheckpointCorruptError(
                f"{path}: tensor {name!r} carries {data.size} values for shape {shape}"
            )
        if not np.all(np.isfinite(data)):
            raise CheckpointCorruptError(f"{path}: tensor {name!r} has non-finite entries")
        values[name] = data.reshape(shape)
    return BrnnParams(**values), dims, vocab

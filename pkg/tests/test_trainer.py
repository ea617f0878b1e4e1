import json

import numpy as np
import pytest

from relnet import brnn, trainer
from relnet.brnn import BrnnParams, NetworkDims
from relnet.dataset import Box, ImageRecord, PredicateVocabulary, Triplet
from relnet.embeddings import EmbeddingTable
from relnet.errors import (CheckpointCorruptError, CheckpointShapeError,
                           CheckpointVersionError, EmptyDatasetError, ShapeError)
from relnet.trainer import (TrainingConfig, clip_gradients, global_norm,
                            load_checkpoint, save_checkpoint, sgd_step, train)

TINY = NetworkDims(input_dim=4, hidden_dim=3, output_dim=3)


def _grads_with_norm(entries):
    """All-zero tensors except the first few w_xh_l1 entries."""
    g = brnn.zero_params(TINY)
    flat = g.w_xh_l1.ravel()
    flat[:len(entries)] = entries
    return g


def test_clip_below_threshold_returns_input_unchanged():
    g = _grads_with_norm([3.0])
    out = clip_gradients(g, 5.0)
    assert out is g


def test_clip_scales_to_the_threshold_exactly():
    g = _grads_with_norm([6.0, 8.0])  # global norm 10
    out = clip_gradients(g, 5.0)
    assert out.w_xh_l1.ravel()[:2].tolist() == [3.0, 4.0]
    assert global_norm(out) == 5.0


def test_clip_leaves_zero_gradients_alone():
    g = brnn.zero_params(TINY)
    assert clip_gradients(g, 5.0) is g


def test_clip_preserves_direction():
    rng = np.random.default_rng(0)
    g = BrnnParams(*(rng.standard_normal(arr.shape) * 10
                     for _, arr in brnn.zero_params(TINY).tensors()))
    out = clip_gradients(g, 1.0)
    u = brnn.params_to_vector(g)
    v = brnn.params_to_vector(out)
    cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    assert cos == pytest.approx(1.0, abs=1e-12)
    assert global_norm(out) <= global_norm(g)


def test_sgd_step_zero_lr_is_identity_valued():
    params = brnn.init_params(TINY, seed=0)
    grads = brnn.init_params(TINY, seed=1)
    out = sgd_step(params, grads, 0.0)
    for (_, a), (_, b) in zip(params.tensors(), out.tensors()):
        assert np.array_equal(a, b)


def test_sgd_step_scalar_arithmetic():
    params = _grads_with_norm([1.0])
    grads = _grads_with_norm([2.0])
    out = sgd_step(params, grads, 0.01)
    assert out.w_xh_l1.ravel()[0] == pytest.approx(0.98, abs=1e-15)


def test_two_steps_equal_one_step_at_doubled_rate():
    params = brnn.init_params(TINY, seed=2)
    grads = brnn.init_params(TINY, seed=3)
    twice = sgd_step(sgd_step(params, grads, 0.01), grads, 0.01)
    once = sgd_step(params, grads, 0.02)
    for (_, a), (_, b) in zip(twice.tensors(), once.tensors()):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-15)


def test_sgd_step_rejects_shape_mismatch():
    params = brnn.init_params(TINY, seed=0)
    grads = brnn.init_params(NetworkDims(input_dim=5, hidden_dim=3, output_dim=3), seed=0)
    with pytest.raises(ShapeError):
        sgd_step(params, grads, 0.01)


def test_small_step_does_not_increase_batch_loss():
    init = brnn.init_params(TINY, seed=4)
    rng = np.random.default_rng(5)
    # zero-init biases sit exactly on ReLU kinks once a layer-1 state dies;
    # nudge every tensor a little so the batch is at a smooth point
    params = BrnnParams(*(arr + 0.01 * rng.standard_normal(arr.shape)
                          for _, arr in init.tensors()))
    xs = rng.standard_normal((8, 3, 4))
    targets = rng.integers(0, 3, size=8)
    trace = brnn.forward_batch(params, xs)
    assert not np.any(trace.pre1 == 0.0) and not np.any(trace.pre2 == 0.0)  # off the kinks
    before = float(np.mean(brnn.batch_losses(trace.probs, targets)))
    dlogits = trace.probs.copy()
    dlogits[np.arange(8), targets] -= 1.0
    dlogits /= 8.0
    grads = brnn.backward_batch(params, trace, dlogits)
    stepped = sgd_step(params, grads, 1e-4)
    after = float(np.mean(brnn.batch_losses(brnn.forward_batch(stepped, xs).probs, targets)))
    assert after <= before + 1e-12


# ------------------------------------------------------------------- train

VOCAB = PredicateVocabulary(("left", "right"))
OBJECT_VOCAB = ["alpha", "beta"]


def _toy_world():
    rng = np.random.default_rng(6)
    table = EmbeddingTable(8, OBJECT_VOCAB, rng.standard_normal((2, 8)))
    left = Box(0.05, 0.4, 0.2, 0.2)
    right = Box(0.7, 0.4, 0.2, 0.2)
    records = []
    for i in range(8):
        s_label, o_label = (0, 1) if i % 2 == 0 else (1, 0)
        pred = i % 2
        objects = ((s_label, left), (o_label, right))
        records.append(ImageRecord(
            image_id=f"img{i}", width=64, height=64,
            gt_objects=objects,
            gt_triplets=(Triplet(0, 1, s_label, pred, o_label, left, right),),
        ))
    return table, records


def _toy_config(**overrides):
    base = dict(learning_rate=0.1, batch_size=4, max_epochs=30, seed=1, neg_ratio=0.0)
    base.update(overrides)
    return TrainingConfig(**base)


def test_train_is_deterministic_per_seed():
    table, records = _toy_world()
    dims = NetworkDims(input_dim=8, hidden_dim=4, output_dim=VOCAB.output_dim)
    p1, h1 = train(records, table, VOCAB, OBJECT_VOCAB, _toy_config(), dims)
    p2, h2 = train(records, table, VOCAB, OBJECT_VOCAB, _toy_config(), dims)
    for (_, a), (_, b) in zip(p1.tensors(), p2.tensors()):
        assert np.array_equal(a, b)
    assert h1.losses == h2.losses
    assert h1.accuracies == h2.accuracies


def test_train_learns_the_toy_rule():
    table, records = _toy_world()
    dims = NetworkDims(input_dim=8, hidden_dim=4, output_dim=VOCAB.output_dim)
    params, history = train(records, table, VOCAB, OBJECT_VOCAB, _toy_config(), dims)
    assert history.accuracies[-1] == 1.0
    assert history.losses[-1] < history.initial_loss


def test_full_batch_first_epoch_loss_equals_initial_loss():
    # with one batch covering every example, the first epoch's mean training
    # loss is computed before any update, i.e. at the initial parameters
    table, records = _toy_world()
    dims = NetworkDims(input_dim=8, hidden_dim=4, output_dim=VOCAB.output_dim)
    _, history = train(records, table, VOCAB, OBJECT_VOCAB,
                       _toy_config(batch_size=64, max_epochs=1), dims)
    assert history.losses[0] == pytest.approx(history.initial_loss, rel=1e-12)


def test_train_rejects_empty_input():
    table, _ = _toy_world()
    with pytest.raises(EmptyDatasetError):
        train([], table, VOCAB, OBJECT_VOCAB, _toy_config())


def test_history_lengths_match_epochs():
    table, records = _toy_world()
    dims = NetworkDims(input_dim=8, hidden_dim=4, output_dim=VOCAB.output_dim)
    _, history = train(records, table, VOCAB, OBJECT_VOCAB,
                       _toy_config(max_epochs=7), dims)
    assert len(history.losses) == 7
    assert len(history.accuracies) == 7


# ------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = brnn.init_params(TINY, seed=11)
    vocab = PredicateVocabulary(("a", "b"))
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, TINY, vocab, path)
    loaded, dims, loaded_vocab = load_checkpoint(path)
    assert dims == TINY
    assert loaded_vocab.names == vocab.names
    for (_, a), (_, b) in zip(params.tensors(), loaded.tensors()):
        assert np.array_equal(a, b)


def test_checkpoint_version_mismatch(tmp_path):
    params = brnn.init_params(TINY, seed=0)
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, TINY, PredicateVocabulary(("a", "b")), path)
    payload = json.loads(path.read_text())
    payload["format_version"] = 2
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    params = brnn.init_params(TINY, seed=0)
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, TINY, PredicateVocabulary(("a", "b")), path)
    payload = json.loads(path.read_text())
    payload["tensors"]["b_y"]["shape"] = [4]
    payload["tensors"]["b_y"]["data"] = [0.0, 0.0, 0.0, 0.0]
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_checkpoint_truncated_file(tmp_path):
    params = brnn.init_params(TINY, seed=0)
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, TINY, PredicateVocabulary(("a", "b")), path)
    text = path.read_text()
    path.write_text(text[:len(text) // 2])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_checkpoint_missing_tensor(tmp_path):
    params = brnn.init_params(TINY, seed=0)
    path = tmp_path / "ckpt.json"
    save_checkpoint(params, TINY, PredicateVocabulary(("a", "b")), path)
    payload = json.loads(path.read_text())
    del payload["tensors"]["w_hy"]
    path.write_text(json.dumps(payload))
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)

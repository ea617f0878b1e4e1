"""Two-layer bidirectional recurrent network over a fixed 3-step sequence.

The inputs are, in order: the subject word vector, the spatial vector
holding both boxes, and the object word vector.  Each layer runs the
recurrence in both time directions with ReLU states and zero boundary
states; layer 2 consumes the concatenated [forward; backward] layer-1
states.  The output block projects every layer-2 state through its own
(timestep, direction) matrix and sums the six projections plus a bias into
one (K+1)-way logit vector; index K is the no-relation class.

Gradients are exact reverse-mode derivatives computed by hand in
``relnet.kernels``; ``grad_check`` verifies them against central finite
differences coordinate by coordinate.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError


@dataclass(frozen=True)
class NetworkDims:
    """Network widths. The layer count is fixed at two."""

    input_dim: int = 300
    hidden_dim: int = 128
    output_dim: int = 71
    num_layers: int = 2

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError("input_dim and hidden_dim must be >= 1")
        if self.output_dim < 2:
            raise ValueError("output_dim must be >= 2 (K real predicates plus no-relation)")
        if self.num_layers != 2:
            raise ValueError("the architecture is fixed at 2 hidden layers")


# field name -> shape template, with D = input, H = hidden, O = output width
_FIELD_SHAPES = (
    ("w_xh_l1", lambda d, h, o: (2, h, d)),
    ("w_hh_l1", lambda d, h, o: (2, h, h)),
    ("b_h_l1", lambda d, h, o: (2, h)),
    ("w_xh_l2", lambda d, h, o: (2, h, 2 * h)),
    ("w_hh_l2", lambda d, h, o: (2, h, h)),
    ("b_h_l2", lambda d, h, o: (2, h)),
    ("w_hy", lambda d, h, o: (3, 2, o, h)),
    ("b_y", lambda d, h, o: (o,)),
)

FIELD_NAMES = tuple(name for name, _ in _FIELD_SHAPES)


def field_shapes(dims: NetworkDims) -> dict[str, tuple[int, ...]]:
    d, h, o = dims.input_dim, dims.hidden_dim, dims.output_dim
    return {name: shape(d, h, o) for name, shape in _FIELD_SHAPES}


@dataclass(frozen=True)
class BrnnParams:
    """All weight tensors, stacked per direction (index 0 forward, 1 backward).

    The same container holds gradients, which mirror every shape.
    """

    w_xh_l1: np.ndarray  # (2, H, D)
    w_hh_l1: np.ndarray  # (2, H, H)
    b_h_l1: np.ndarray   # (2, H)
    w_xh_l2: np.ndarray  # (2, H, 2H)
    w_hh_l2: np.ndarray  # (2, H, H)
    b_h_l2: np.ndarray   # (2, H)
    w_hy: np.ndarray     # (3, 2, K+1, H), one matrix per timestep and direction
    b_y: np.ndarray      # (K+1,)

    def tensors(self) -> tuple[tuple[str, np.ndarray], ...]:
        return tuple((name, getattr(self, name)) for name in FIELD_NAMES)

    @property
    def dims(self) -> NetworkDims:
        return NetworkDims(
            input_dim=self.w_xh_l1.shape[2],
            hidden_dim=self.w_hh_l1.shape[1],
            output_dim=self.b_y.shape[0],
        )

    def validate(self) -> None:
        expected = field_shapes(self.dims)
        for name, arr in self.tensors():
            if arr.shape != expected[name]:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")


def zero_params(dims: NetworkDims) -> BrnnParams:
    shapes = field_shapes(dims)
    return BrnnParams(**{name: np.zeros(shapes[name]) for name in FIELD_NAMES})


def init_params(dims: NetworkDims, seed: int) -> BrnnParams:
    """Uniform [-a, a] weights with a = sqrt(6 / (fan_in + fan_out)); zero biases.

    Tensors are drawn in declaration order from one seeded generator, so a
    seed pins every entry.
    """
    rng = np.random.default_rng(seed)
    values = {}
    for name, shape in field_shapes(dims).items():
        if name.startswith("b_"):
            values[name] = np.zeros(shape)
            continue
        fan_in = shape[-1]
        fan_out = shape[-2]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        values[name] = rng.uniform(-a, a, size=shape)
    return BrnnParams(**values)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax requires finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ForwardTrace:
    """Everything the backward pass needs for one example.

    State arrays are (direction, timestep, hidden); direction 0 is the
    forward-time pass, 1 the backward-time pass.
    """

    inputs: np.ndarray  # (3, D)
    pre1: np.ndarray    # (2, 3, H)
    h1: np.ndarray      # (2, 3, H)
    pre2: np.ndarray    # (2, 3, H)
    h2: np.ndarray      # (2, 3, H)
    logits: np.ndarray  # (K+1,)
    probs: np.ndarray   # (K+1,)


@dataclass(frozen=True)
class BatchTrace:
    """Batched counterpart of ForwardTrace; arrays carry a batch axis.

    State arrays are (direction, timestep, batch, hidden), matching the
    kernel layout; inputs are (3, batch, D).
    """

    inputs: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    logits: np.ndarray  # (batch, K+1)
    probs: np.ndarray   # (batch, K+1)


def forward_batch(params: BrnnParams, xs: np.ndarray) -> BatchTrace:
    """Run the network on a stack of examples, xs shaped (batch, 3, D)."""
    xs = np.asarray(xs, dtype=np.float64)
    d_in = params.w_xh_l1.shape[2]
    if xs.ndim != 3 or xs.shape[1] != 3 or xs.shape[2] != d_in:
        raise ShapeError(f"expected inputs shaped (batch, 3, {d_in}), got {xs.shape}")
    x = np.ascontiguousarray(np.transpose(xs, (1, 0, 2)))
    pre1, h1, pre2, h2, logits = kernels.forward(
        params.w_xh_l1, params.w_hh_l1, params.b_h_l1,
        params.w_xh_l2, params.w_hh_l2, params.b_h_l2,
        params.w_hy, params.b_y, x,
    )
    return BatchTrace(x, pre1, h1, pre2, h2, logits, softmax(logits))


def backward_batch(params: BrnnParams, trace: BatchTrace, dlogits: np.ndarray) -> BrnnParams:
    """Parameter gradients for a batch, given dLoss/dlogits (batch, K+1)."""
    grads = kernels.backward(
        params.w_xh_l1, params.w_hh_l1, params.b_h_l1,
        params.w_xh_l2, params.w_hh_l2, params.b_h_l2,
        params.w_hy, params.b_y, trace.inputs,
        trace.pre1, trace.h1, trace.pre2, trace.h2,
        np.ascontiguousarray(dlogits),
    )
    return BrnnParams(*grads)


def forward(params: BrnnParams, x1: np.ndarray, x2: np.ndarray, x3: np.ndarray) -> ForwardTrace:
    """Full pass on one (subject vector, spatial vector, object vector) triple."""
    d_in = params.w_xh_l1.shape[2]
    parts = []
    for i, v in enumerate((x1, x2, x3)):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (d_in,):
            raise ShapeError(f"input {i + 1} has shape {v.shape}, expected ({d_in},)")
        parts.append(v)
    batch = forward_batch(params, np.stack(parts)[np.newaxis])
    return ForwardTrace(
        inputs=batch.inputs[:, 0, :].copy(),
        pre1=batch.pre1[:, :, 0, :].copy(),
        h1=batch.h1[:, :, 0, :].copy(),
        pre2=batch.pre2[:, :, 0, :].copy(),
        h2=batch.h2[:, :, 0, :].copy(),
        logits=batch.logits[0].copy(),
        probs=batch.probs[0].copy(),
    )


PROB_FLOOR = 1e-12  # inside the log only, so a one-hot miss cannot yield -inf


def loss(trace: ForwardTrace, target: int) -> float:
    """Cross-entropy -ln p(target) with the probability floored at 1e-12."""
    n_out = trace.probs.shape[0]
    if not 0 <= target < n_out:
        raise IndexError(f"target {target} out of range for {n_out} classes")
    return float(-np.log(max(trace.probs[target], PROB_FLOOR)))


def batch_losses(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    n_out = probs.shape[1]
    targets = np.asarray(targets)
    if targets.min() < 0 or targets.max() >= n_out:
        raise IndexError("target out of range")
    picked = probs[np.arange(len(targets)), targets]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def backward(params: BrnnParams, trace: ForwardTrace, target: int) -> BrnnParams:
    """Gradient of ``loss(trace, target)`` for every parameter tensor."""
    n_out = trace.probs.shape[0]
    if not 0 <= target < n_out:
        raise IndexError(f"target {target} out of range for {n_out} classes")
    dlogits = trace.probs.copy()
    dlogits[target] -= 1.0
    batch = BatchTrace(
        inputs=np.ascontiguousarray(trace.inputs[:, np.newaxis, :]),
        pre1=np.ascontiguousarray(trace.pre1[:, :, np.newaxis, :]),
        h1=np.ascontiguousarray(trace.h1[:, :, np.newaxis, :]),
        pre2=np.ascontiguousarray(trace.pre2[:, :, np.newaxis, :]),
        h2=np.ascontiguousarray(trace.h2[:, :, np.newaxis, :]),
        logits=trace.logits[np.newaxis],
        probs=trace.probs[np.newaxis],
    )
    return backward_batch(params, batch, dlogits[np.newaxis])


def params_to_vector(params: BrnnParams) -> np.ndarray:
    return np.concatenate([arr.ravel() for _, arr in params.tensors()])


def vector_to_params(vec: np.ndarray, dims: NetworkDims) -> BrnnParams:
    shapes = field_shapes(dims)
    values = {}
    offset = 0
    for name in FIELD_NAMES:
        size = int(np.prod(shapes[name]))
        values[name] = vec[offset:offset + size].reshape(shapes[name]).copy()
        offset += size
    if offset != vec.size:
        raise ShapeError(f"vector has {vec.size} entries, expected {offset}")
    return BrnnParams(**values)


def grad_check(dims: NetworkDims, seed: int, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    One seeded random example; every parameter coordinate is perturbed by
    +/- epsilon.  The relative error is |ga - gf| / max(1e-8, |ga| + |gf|).
    Intended for small networks (a few thousand parameters).
    """
    params = init_params(dims, seed)
    rng = np.random.default_rng(seed + 1)
    x1 = rng.standard_normal(dims.input_dim)
    x2 = rng.standard_normal(dims.input_dim)
    x3 = rng.standard_normal(dims.input_dim)
    target = int(rng.integers(dims.output_dim))

    analytic = params_to_vector(backward(params, forward(params, x1, x2, x3), target))
    theta = params_to_vector(params)

    def loss_at(vec: np.ndarray) -> float:
        p = vector_to_params(vec, dims)
        return loss(forward(p, x1, x2, x3), target)

    worst = 0.0
    for i in range(theta.size):
        saved = theta[i]
        theta[i] = saved + epsilon
        up = loss_at(theta)
        theta[i] = saved - epsilon
        down = loss_at(theta)
        theta[i] = saved
        fd = (up - down) / (2.0 * epsilon)
        denom = max(1e-8, abs(analytic[i]) + abs(fd))
        worst = max(worst, abs(analytic[i] - fd) / denom)
    return worst

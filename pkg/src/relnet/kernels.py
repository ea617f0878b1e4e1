"""Hot forward/backward kernels for the 3-step bidirectional recurrence.

One function body per kernel, used both as-is (numpy path) and wrapped in
``numba.njit`` (compiled path); ``relnet.backend`` decides which pair the
package runs on.  Everything is float64.  States are laid out
(direction, timestep, batch, hidden) so each 2-d slice handed to np.dot is
C-contiguous; direction 0 walks t = 0,1,2 and direction 1 walks t = 2,1,0.
"""

import numpy as np

from . import backend

SEQ_LEN = 3  # subject word vector, spatial vector, object word vector


def _forward(w_xh1, w_hh1, b_h1, w_xh2, w_hh2, b_h2, w_hy, b_y, x):
    # x: (3, B, D). Returns per-layer pre-activations and ReLU states,
    # each (2, 3, B, H), plus logits (B, K+1).
    B = x.shape[1]
    H = w_hh1.shape[1]
    n_out = b_y.shape[0]

    pre1 = np.zeros((2, 3, B, H))
    act1 = np.zeros((2, 3, B, H))
    for d in range(2):
        wx_t = np.ascontiguousarray(w_xh1[d].T)
        wh_t = np.ascontiguousarray(w_hh1[d].T)
        h = np.zeros((B, H))
        for step in range(3):
            t = step if d == 0 else 2 - step
            p = np.dot(x[t], wx_t) + np.dot(h, wh_t) + b_h1[d]
            h = np.maximum(p, 0.0)
            pre1[d, t] = p
            act1[d, t] = h

    # layer 2 reads the concatenated [forward; backward] layer-1 states
    z = np.empty((3, B, 2 * H))
    for t in range(3):
        z[t, :, :H] = act1[0, t]
        z[t, :, H:] = act1[1, t]

    pre2 = np.zeros((2, 3, B, H))
    act2 = np.zeros((2, 3, B, H))
    for d in range(2):
        wx_t = np.ascontiguousarray(w_xh2[d].T)
        wh_t = np.ascontiguousarray(w_hh2[d].T)
        h = np.zeros((B, H))
        for step in range(3):
            t = step if d == 0 else 2 - step
            p = np.dot(z[t], wx_t) + np.dot(h, wh_t) + b_h2[d]
            h = np.maximum(p, 0.0)
            pre2[d, t] = p
            act2[d, t] = h

    logits = np.zeros((B, n_out)) + b_y
    for t in range(3):
        for d in range(2):
            logits += np.dot(act2[d, t], np.ascontiguousarray(w_hy[t, d].T))
    return pre1, act1, pre2, act2, logits


def _backward(w_xh1, w_hh1, b_h1, w_xh2, w_hh2, b_h2, w_hy, b_y, x,
              pre1, act1, pre2, act2, dlogits):
    # Reverse-mode pass: dlogits is dLoss/dlogits, (B, K+1). Returns the
    # gradient of every parameter tensor, summed over the batch.
    B = x.shape[1]
    H = w_hh1.shape[1]

    g_w_xh1 = np.zeros_like(w_xh1)
    g_w_hh1 = np.zeros_like(w_hh1)
    g_b_h1 = np.zeros_like(b_h1)
    g_w_xh2 = np.zeros_like(w_xh2)
    g_w_hh2 = np.zeros_like(w_hh2)
    g_b_h2 = np.zeros_like(b_h2)
    g_w_hy = np.zeros_like(w_hy)
    g_b_y = np.sum(dlogits, 0)

    dl_t = np.ascontiguousarray(dlogits.T)
    dact2 = np.zeros((2, 3, B, H))
    for t in range(3):
        for d in range(2):
            g_w_hy[t, d] = np.dot(dl_t, act2[d, t])
            dact2[d, t] = np.dot(dlogits, w_hy[t, d])

    z = np.empty((3, B, 2 * H))
    for t in range(3):
        z[t, :, :H] = act1[0, t]
        z[t, :, H:] = act1[1, t]

    zeros_h = np.zeros((B, H))
    dz = np.zeros((3, B, 2 * H))
    for d in range(2):
        carry = np.zeros((B, H))
        for step in range(3):
            # walk opposite to this direction's recurrence order
            t = 2 - step if d == 0 else step
            tprev = t - 1 if d == 0 else t + 1
            dh = dact2[d, t] + carry
            dpre = np.where(pre2[d, t] > 0.0, dh, zeros_h)
            g_b_h2[d] += np.sum(dpre, 0)
            dpre_t = np.ascontiguousarray(dpre.T)
            g_w_xh2[d] += np.dot(dpre_t, z[t])
            if 0 <= tprev <= 2:
                hprev = act2[d, tprev]
            else:
                hprev = zeros_h
            g_w_hh2[d] += np.dot(dpre_t, hprev)
            dz[t] += np.dot(dpre, w_xh2[d])
            carry = np.dot(dpre, w_hh2[d])

    dact1 = np.zeros((2, 3, B, H))
    for t in range(3):
        dact1[0, t] = dz[t, :, :H]
        dact1[1, t] = dz[t, :, H:]

    for d in range(2):
        carry = np.zeros((B, H))
        for step in range(3):
            t = 2 - step if d == 0 else step
            tprev = t - 1 if d == 0 else t + 1
            dh = dact1[d, t] + carry
            dpre = np.where(pre1[d, t] > 0.0, dh, zeros_h)
            g_b_h1[d] += np.sum(dpre, 0)
            dpre_t = np.ascontiguousarray(dpre.T)
            g_w_xh1[d] += np.dot(dpre_t, x[t])
            if 0 <= tprev <= 2:
                hprev = act1[d, tprev]
            else:
                hprev = zeros_h
            g_w_hh1[d] += np.dot(dpre_t, hprev)
            carry = np.dot(dpre, w_hh1[d])

    return g_w_xh1, g_w_hh1, g_b_h1, g_w_xh2, g_w_hh2, g_b_h2, g_w_hy, g_b_y


forward_py = _forward
backward_py = _backward

if backend.NUMBA_AVAILABLE:
    from numba import njit

    forward_njit = njit(cache=True)(_forward)
    backward_njit = njit(cache=True)(_backward)
else:  # pragma: no cover - exercised only without numba installed
    forward_njit = None
    backward_njit = None

if backend.NUMBA_ENABLED:
    forward = forward_njit
    backward = backward_njit
else:
    forward = forward_py
    backward = backward_py

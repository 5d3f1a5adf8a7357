"""Recurrent inner-loop kernels.

The per-timestep LSTM cell update is the hot loop of every forward and
backward pass. A compiled extension (``scevae._recurrent``) is selected at
import time when available; otherwise a pure-numpy twin of the same loop is
used. Set ``SCEVAE_PURE_PYTHON=1`` to force the fallback.

Both backends implement the same contract:

``lstm_seq_forward(xp, U, h0, c0) -> (h, c, gates, tanhc)``
    xp        (T, 4H) input projections plus bias, gate order [i, f, g, o]
    U         (4H, H) recurrent weights
    h0, c0    (H,) initial hidden / cell state
    h, c      (T, H) hidden and cell state sequences
    gates     (T, 4H) post-activation gate values
    tanhc     (T, H) tanh of the cell state

``lstm_seq_backward(dh_out, U, gates, c, tanhc, c0) -> (da, dh0, dc0)``
    dh_out    (T, H) loss gradient w.r.t. each h_t from above
    da        (T, 4H) gradient w.r.t. the pre-activations
    dh0, dc0  (H,) gradients w.r.t. the initial states

Sigmoids are evaluated as ``0.5 * (tanh(0.5 x) + 1)`` in both backends so
that the two implementations agree closely in floating point.
"""

from __future__ import annotations

import os

import numpy as np


def _lstm_seq_forward_py(xp, U, h0, c0):
    T, H4 = xp.shape
    H = H4 // 4
    h = np.empty((T, H))
    c = np.empty((T, H))
    gates = np.empty((T, H4))
    tanhc = np.empty((T, H))
    Ut = np.ascontiguousarray(U.T)
    hprev = h0
    cprev = c0
    for t in range(T):
        a = xp[t] + hprev @ Ut
        gi = 0.5 * (np.tanh(0.5 * a[:H]) + 1.0)
        gf = 0.5 * (np.tanh(0.5 * a[H : 2 * H]) + 1.0)
        gg = np.tanh(a[2 * H : 3 * H])
        go = 0.5 * (np.tanh(0.5 * a[3 * H :]) + 1.0)
        ct = gf * cprev + gi * gg
        tc = np.tanh(ct)
        ht = go * tc
        gates[t, :H] = gi
        gates[t, H : 2 * H] = gf
        gates[t, 2 * H : 3 * H] = gg
        gates[t, 3 * H :] = go
        c[t] = ct
        tanhc[t] = tc
        h[t] = ht
        hprev = ht
        cprev = ct
    return h, c, gates, tanhc


def _lstm_seq_backward_py(dh_out, U, gates, c, tanhc, c0):
    T, H = dh_out.shape
    da = np.empty((T, 4 * H))
    dh = np.zeros(H)
    dc = np.zeros(H)
    for t in range(T - 1, -1, -1):
        dht = dh_out[t] + dh
        gi = gates[t, :H]
        gf = gates[t, H : 2 * H]
        gg = gates[t, 2 * H : 3 * H]
        go = gates[t, 3 * H :]
        tc = tanhc[t]
        cprev = c[t - 1] if t > 0 else c0
        dct = dc + dht * go * (1.0 - tc * tc)
        da[t, :H] = dct * gg * gi * (1.0 - gi)
        da[t, H : 2 * H] = dct * cprev * gf * (1.0 - gf)
        da[t, 2 * H : 3 * H] = dct * gi * (1.0 - gg * gg)
        da[t, 3 * H :] = dht * tc * go * (1.0 - go)
        dc = dct * gf
        dh = da[t] @ U
    return da, dh, dc


_compiled = None
if not os.environ.get("SCEVAE_PURE_PYTHON"):
    try:
        from . import _recurrent as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None

if _compiled is not None:
    lstm_seq_forward = _compiled.lstm_seq_forward
    lstm_seq_backward = _compiled.lstm_seq_backward
    BACKEND = "compiled"
else:
    lstm_seq_forward = _lstm_seq_forward_py
    lstm_seq_backward = _lstm_seq_backward_py
    BACKEND = "python"


def backend() -> str:
    """Name of the active kernel backend: ``compiled`` or ``python``."""
    return BACKEND

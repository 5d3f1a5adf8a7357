"""Stacked LSTM heads with linear Gaussian outputs and hand-rolled backprop.

Every conditional distribution in the model is parameterized by the same
building block: an ``n_layers``-deep unidirectional LSTM over the input
sequence followed by linear maps from the top hidden state to a per-step
mean and a raw (pre-softplus) variance. Heads that model binary components
carry an extra linear logit output.

A head is a flat dict of named arrays:

    W{l}  (4H, n_in_l)   input weights of layer l, gate order [i, f, g, o]
    U{l}  (4H, H)        recurrent weights of layer l
    b{l}  (4H,)          bias of layer l (forget-gate slice initialized to 1)
    Wm, bm               mean output
    Wv, bv               raw-variance output
    Wp, bp               logit output (only when n_logit > 0)

Hidden and cell states start at zero for every processed window. Outputs at
step t depend only on inputs at steps <= t.
"""

from __future__ import annotations

import numpy as np

from ._kernels import lstm_seq_backward, lstm_seq_forward

GATES_PER_CELL = 4


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_head(
    rng: np.random.Generator,
    n_in: int,
    hidden: int,
    n_layers: int,
    n_out: int,
    n_logit: int = 0,
) -> dict[str, np.ndarray]:
    """Initialize one head: orthogonal recurrent blocks, small-uniform
    input/output weights, forget-gate bias 1."""
    head: dict[str, np.ndarray] = {}
    d = n_in
    for layer in range(n_layers):
        scale = 1.0 / np.sqrt(max(d, 1))
        head[f"W{layer}"] = rng.uniform(-scale, scale, size=(4 * hidden, d))
        head[f"U{layer}"] = np.vstack(
            [_orthogonal(rng, hidden) for _ in range(GATES_PER_CELL)]
        )
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        head[f"b{layer}"] = b
        d = hidden
    head["Wm"] = rng.uniform(-0.1, 0.1, size=(n_out, hidden))
    head["bm"] = np.zeros(n_out)
    head["Wv"] = rng.uniform(-0.1, 0.1, size=(n_out, hidden))
    head["bv"] = np.zeros(n_out)
    if n_logit:
        head["Wp"] = rng.uniform(-0.1, 0.1, size=(n_logit, hidden))
        head["bp"] = np.zeros(n_logit)
    return head


def head_layers(head: dict[str, np.ndarray]) -> int:
    return sum(1 for k in head if k.startswith("W") and k[1:].isdigit())


class StackCache:
    """Forward-pass activations needed by the backward pass."""

    __slots__ = ("inputs", "gates", "cells", "tanhc", "hidden", "h_top")

    def __init__(self):
        self.inputs: list[np.ndarray] = []
        self.gates: list[np.ndarray] = []
        self.cells: list[np.ndarray] = []
        self.tanhc: list[np.ndarray] = []
        self.hidden: list[np.ndarray] = []
        self.h_top: np.ndarray | None = None


def stack_forward(head: dict[str, np.ndarray], inp: np.ndarray) -> StackCache:
    """Run the LSTM stack over ``inp`` (T, n_in). Returns the cache with
    ``h_top`` (T, H)."""
    n_layers = head_layers(head)
    hidden = head["U0"].shape[1]
    cache = StackCache()
    x = np.ascontiguousarray(inp, dtype=np.float64)
    T = x.shape[0]
    if T == 0:
        cache.h_top = np.zeros((0, hidden))
        return cache
    h0 = np.zeros(hidden)
    c0 = np.zeros(hidden)
    for layer in range(n_layers):
        xp = x @ head[f"W{layer}"].T + head[f"b{layer}"]
        h, c, gates, tanhc = lstm_seq_forward(
            np.ascontiguousarray(xp), head[f"U{layer}"], h0, c0
        )
        cache.inputs.append(x)
        cache.gates.append(gates)
        cache.cells.append(c)
        cache.tanhc.append(tanhc)
        cache.hidden.append(h)
        x = h
    cache.h_top = x
    return cache


def stack_backward(
    head: dict[str, np.ndarray], cache: StackCache, dh_top: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backprop ``dh_top`` (T, H) through the stack.

    Returns (grads for W*/U*/b*, gradient w.r.t. the external input).
    """
    n_layers = head_layers(head)
    hidden = head["U0"].shape[1]
    grads: dict[str, np.ndarray] = {}
    if dh_top.shape[0] == 0:
        for layer in range(n_layers):
            for k in (f"W{layer}", f"U{layer}", f"b{layer}"):
                grads[k] = np.zeros_like(head[k])
        return grads, np.zeros((0, head["W0"].shape[1]))
    c0 = np.zeros(hidden)
    dh = np.ascontiguousarray(dh_top)
    for layer in range(n_layers - 1, -1, -1):
        da, _, _ = lstm_seq_backward(
            dh,
            head[f"U{layer}"],
            cache.gates[layer],
            cache.cells[layer],
            cache.tanhc[layer],
            c0,
        )
        h = cache.hidden[layer]
        hprev = np.vstack([np.zeros((1, hidden)), h[:-1]])
        grads[f"W{layer}"] = da.T @ cache.inputs[layer]
        grads[f"U{layer}"] = da.T @ hprev
        grads[f"b{layer}"] = da.sum(axis=0)
        dh = np.ascontiguousarray(da @ head[f"W{layer}"])
    return grads, dh


def head_forward(
    head: dict[str, np.ndarray], inp: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, StackCache]:
    """Forward one head: returns (mu, rawvar, logits or None, cache)."""
    cache = stack_forward(head, inp)
    h = cache.h_top
    mu = h @ head["Wm"].T + head["bm"]
    rawv = h @ head["Wv"].T + head["bv"]
    logits = h @ head["Wp"].T + head["bp"] if "Wp" in head else None
    return mu, rawv, logits, cache


def head_backward(
    head: dict[str, np.ndarray],
    cache: StackCache,
    dmu: np.ndarray,
    drawv: np.ndarray,
    dlogits: np.ndarray | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backprop through one head's output maps and LSTM stack.

    Returns (grads for all head arrays, gradient w.r.t. the input sequence).
    """
    h = cache.h_top
    grads = {
        "Wm": dmu.T @ h,
        "bm": dmu.sum(axis=0),
        "Wv": drawv.T @ h,
        "bv": drawv.sum(axis=0),
    }
    dh = dmu @ head["Wm"] + drawv @ head["Wv"]
    if "Wp" in head:
        if dlogits is None:
            dlogits = np.zeros((h.shape[0], head["Wp"].shape[0]))
        grads["Wp"] = dlogits.T @ h
        grads["bp"] = dlogits.sum(axis=0)
        dh = dh + dlogits @ head["Wp"]
    stack_grads, dinp = stack_backward(head, cache, dh)
    grads.update(stack_grads)
    return grads, dinp

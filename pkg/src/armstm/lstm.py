"""Multi-layer LSTM with hand-derived forward and backward passes.

Gate order inside the fused (4H) pre-activation is (i, f, g, o):
input gate, forget gate, cell candidate, output gate.  The backward pass
is exact BPTT; no autodiff anywhere.
"""

import numpy as np

from .core import CoreError


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class LstmLayerWeights:
    """One layer: W (4H x D) on the input, U (4H x H) on the hidden state,
    bias b (4H)."""

    def __init__(self, W, U, b):
        self.W = np.asarray(W, dtype=np.float64)
        self.U = np.asarray(U, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        fourH, D = self.W.shape
        if fourH % 4 != 0 or self.U.shape != (fourH, fourH // 4) or self.b.shape != (fourH,):
            raise CoreError("inconsistent LSTM layer shapes")
        self.hidden = fourH // 4
        self.input_dim = D

    def params(self, prefix):
        return {prefix + ".W": self.W, prefix + ".U": self.U, prefix + ".b": self.b}


def init_layer(input_dim, hidden, rng):
    """Uniform [-1/sqrt(H), 1/sqrt(H)] weights, forget-gate bias 1."""
    s = 1.0 / np.sqrt(hidden)
    W = rng.uniform(-s, s, (4 * hidden, input_dim))
    U = rng.uniform(-s, s, (4 * hidden, hidden))
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = 1.0
    return LstmLayerWeights(W, U, b)


def init_stack(input_dim, hidden, layers, rng):
    out = []
    d = input_dim
    for _ in range(layers):
        out.append(init_layer(d, hidden, rng))
        d = hidden
    return out


def zero_state(layers):
    return [(np.zeros(l.hidden), np.zeros(l.hidden)) for l in layers]


def cell_forward(x, prev, w):
    """One LSTM step.  prev is the (h, c) pair of this layer."""
    h_prev, c_prev = prev
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (w.input_dim,) or h_prev.shape != (w.hidden,):
        raise CoreError(
            f"cell_forward shape mismatch: x {x.shape}, h {h_prev.shape}, layer ({w.input_dim},{w.hidden})"
        )
    H = w.hidden
    z = w.W @ x + w.U @ h_prev + w.b
    i = sigmoid(z[:H])
    f = sigmoid(z[H : 2 * H])
    g = np.tanh(z[2 * H : 3 * H])
    o = sigmoid(z[3 * H :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, h_prev, c_prev, i, f, g, o, c, tc)
    return h, c, cache


def cell_backward(grad_h, grad_c, cache, w):
    """Exact gradients of one step.  Returns (dx, dh_prev, dc_prev, dw) where
    dw has keys 'W', 'U', 'b'."""
    x, h_prev, c_prev, i, f, g, o, c, tc = cache
    do = grad_h * tc
    dc = grad_c + grad_h * o * (1.0 - tc**2)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), dg * (1 - g**2), do * o * (1 - o)]
    )
    dw = {"W": np.outer(dz, x), "U": np.outer(dz, h_prev), "b": dz}
    dx = w.W.T @ dz
    dh_prev = w.U.T @ dz
    return dx, dh_prev, dc_prev, dw


def stack_forward(x, states, layers):
    """Feed x bottom-up through the stack; returns (h_top, new_states, caches)."""
    if len(states) != len(layers):
        raise CoreError("state/layer count mismatch")
    caches = []
    new_states = []
    inp = x
    for st, w in zip(states, layers):
        h, c, cache = cell_forward(inp, st, w)
        caches.append(cache)
        new_states.append((h, c))
        inp = h
    return inp, new_states, caches


def zero_grads(layers):
    return [
        {"W": np.zeros_like(l.W), "U": np.zeros_like(l.U), "b": np.zeros_like(l.b)}
        for l in layers
    ]


def stack_backward_through_time(step_grads, caches, layers):
    """BPTT over a full unroll.

    step_grads: upstream gradient on the top hidden vector, one per step.
    caches: per-step list of per-layer caches from stack_forward.
    Returns (per-layer weight grads, grads of the initial (h, c) states).
    """
    if len(step_grads) != len(caches):
        raise CoreError("step count mismatch between grads and caches")
    L = len(layers)
    wgrads = zero_grads(layers)
    dh = [np.zeros(l.hidden) for l in layers]
    dc = [np.zeros(l.hidden) for l in layers]
    for t in range(len(caches) - 1, -1, -1):
        dx_above = None
        for l in range(L - 1, -1, -1):
            gh = dh[l].copy()
            if l == L - 1:
                gh += step_grads[t]
            if dx_above is not None:
                gh += dx_above
            dx, dh_prev, dc_prev, dw = cell_backward(gh, dc[l], caches[t][l], layers[l])
            for k in dw:
                wgrads[l][k] += dw[k]
            dh[l] = dh_prev
            dc[l] = dc_prev
            dx_above = dx
    return wgrads, list(zip(dh, dc))

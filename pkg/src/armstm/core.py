"""Dense linear algebra helpers, seeded randomness and the Adam optimizer.

Everything here is a pure function of its inputs; randomness flows through
an explicit Rng object so runs reproduce exactly from a seed.
"""

import numpy as np


class CoreError(ValueError):
    pass


class Rng:
    """Deterministic random stream.

    Uniform draws come from PCG64 (seeded, platform-independent); normal
    draws are produced by the Box-Muller transform on those uniforms, so
    the whole stream is documented and reproducible across machines.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self._spare = None

    def derive(self, index):
        """Independent child stream (seed xor index), e.g. one per demo."""
        return Rng(self.seed ^ (int(index) + 0x9E3779B97F4A7C15))

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low, high, size=None):
        return low + (high - low) * self._gen.random(size)

    def integers(self, n):
        return int(self._gen.integers(n))

    def normal(self, mean=0.0, std=1.0):
        return gaussian_sample(self, mean, std)

    def normal_vector(self, size, mean=0.0, std=1.0):
        return np.array([gaussian_sample(self, mean, std) for _ in range(size)])


def gaussian_sample(rng, mean, std):
    """One draw from N(mean, std^2) via Box-Muller; std=0 returns mean."""
    if std < 0:
        raise CoreError(f"negative std {std}")
    if std == 0:
        return float(mean)
    if rng._spare is not None:
        z = rng._spare
        rng._spare = None
    else:
        # u1 in (0,1]: avoid log(0)
        u1 = 1.0 - rng._gen.random()
        u2 = rng._gen.random()
        r = np.sqrt(-2.0 * np.log(u1))
        z = r * np.cos(2.0 * np.pi * u2)
        rng._spare = r * np.sin(2.0 * np.pi * u2)
    return float(mean + std * z)


def matvec(W, x):
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise CoreError(f"matvec shape mismatch: {W.shape} x {x.shape}")
    return W @ x


def logsumexp(xs):
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise CoreError("logsumexp of empty input")
    m = np.max(xs)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(xs - m))))


class AdamState:
    """Moment estimates and step counter for one parameter vector."""

    def __init__(self, dim, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns (new_params, state)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise CoreError(
            f"adam_step shape mismatch: {params.shape} vs {grads.shape} vs {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise CoreError("non-finite gradient entries in adam_step")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, state


class DictAdam:
    """Adam over a dict of named arrays (flattened views, one state each)."""

    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.states = {
            k: AdamState(int(np.prod(s)), lr, beta1, beta2, eps)
            for k, s in shapes.items()
        }

    def step(self, params, grads):
        out = {}
        for k, p in params.items():
            new_flat, _ = adam_step(p.ravel(), grads[k].ravel(), self.states[k])
            out[k] = new_flat.reshape(p.shape)
        return out


def clip_global_norm(grads, max_norm):
    """Scale a dict of gradient arrays so the global L2 norm <= max_norm."""
    total = np.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total

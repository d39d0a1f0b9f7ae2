"""Mixture-density output head: isotropic Gaussian mixture over the next
state, negative log-likelihood loss, analytic gradients and sampling.

The per-component density uses the d-dimensional normalizer
(2*pi*sigma^2)^(-d/2) so the mixture integrates to one for any target
dimension.  Scales are parameterized as exp(raw) + SIGMA_FLOOR.
"""

import numpy as np

from .core import CoreError, logsumexp

SIGMA_FLOOR = 1e-3


class MdnWeights:
    """Linear maps from the hidden vector to mixing logits (m), log-scales
    (m) and means (m*d)."""

    def __init__(self, Wa, ba, Ws, bs, Wm, bm, mixtures, dim):
        self.Wa = np.asarray(Wa, dtype=np.float64)
        self.ba = np.asarray(ba, dtype=np.float64)
        self.Ws = np.asarray(Ws, dtype=np.float64)
        self.bs = np.asarray(bs, dtype=np.float64)
        self.Wm = np.asarray(Wm, dtype=np.float64)
        self.bm = np.asarray(bm, dtype=np.float64)
        self.m = mixtures
        self.d = dim
        H = self.Wa.shape[1]
        if (
            self.Wa.shape != (mixtures, H)
            or self.Ws.shape != (mixtures, H)
            or self.Wm.shape != (mixtures * dim, H)
            or self.ba.shape != (mixtures,)
            or self.bs.shape != (mixtures,)
            or self.bm.shape != (mixtures * dim,)
        ):
            raise CoreError("inconsistent MDN weight shapes")
        self.hidden = H

    def params(self, prefix="mdn"):
        return {
            prefix + ".Wa": self.Wa,
            prefix + ".ba": self.ba,
            prefix + ".Ws": self.Ws,
            prefix + ".bs": self.bs,
            prefix + ".Wm": self.Wm,
            prefix + ".bm": self.bm,
        }


def init_mdn(hidden, mixtures, dim, rng):
    s = 1.0 / np.sqrt(hidden)
    return MdnWeights(
        rng.uniform(-s, s, (mixtures, hidden)),
        np.zeros(mixtures),
        rng.uniform(-s, s, (mixtures, hidden)),
        np.zeros(mixtures),
        rng.uniform(-s, s, (mixtures * dim, hidden)),
        np.zeros(mixtures * dim),
        mixtures,
        dim,
    )


class MixtureParams:
    def __init__(self, alpha, mu, sigma):
        self.alpha = np.asarray(alpha, dtype=np.float64)  # (m,)
        self.mu = np.asarray(mu, dtype=np.float64)        # (m, d)
        self.sigma = np.asarray(sigma, dtype=np.float64)  # (m,)


def mdn_forward(h, w):
    """Map hidden vector to MixtureParams; returns (params, cache)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (w.hidden,):
        raise CoreError(f"mdn_forward: h {h.shape} vs hidden {w.hidden}")
    logits = w.Wa @ h + w.ba
    raw = w.Ws @ h + w.bs
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    alpha = e / np.sum(e)
    sigma = np.exp(raw) + SIGMA_FLOOR
    mu = (w.Wm @ h + w.bm).reshape(w.m, w.d)
    params = MixtureParams(alpha, mu, sigma)
    cache = (h, alpha, sigma, mu)
    return params, cache


def _log_components(params, target):
    """log alpha_i + log N_iso(target; mu_i, sigma_i) for each component."""
    d = params.mu.shape[1]
    r2 = np.sum((target[None, :] - params.mu) ** 2, axis=1)
    log_n = -0.5 * d * np.log(2 * np.pi) - d * np.log(params.sigma) - r2 / (
        2 * params.sigma**2
    )
    with np.errstate(divide="ignore"):
        return np.log(params.alpha) + log_n


def mdn_nll(params, target):
    """Negative log-likelihood of target under the mixture."""
    target = np.asarray(target, dtype=np.float64)
    if params.alpha.size == 0:
        raise CoreError("empty mixture")
    if target.shape != (params.mu.shape[1],) or not np.all(np.isfinite(target)):
        raise CoreError("bad target for mdn_nll")
    return -logsumexp(_log_components(params, target))


def mdn_backward(params, target, cache, w):
    """Exact gradients of mdn_nll w.r.t. the hidden input and MDN weights.

    Uses posterior responsibilities gamma_i = alpha_i N_i / sum_j alpha_j N_j.
    Returns (grad_h, grad_w dict keyed like MdnWeights.params())."""
    h, alpha, sigma, mu = cache
    target = np.asarray(target, dtype=np.float64)
    d = mu.shape[1]
    logc = _log_components(params, target)
    gamma = np.exp(logc - logsumexp(logc))
    # mixing logits: dL/dlogit = alpha - gamma
    dlogits = alpha - gamma
    # means: dL/dmu_i = gamma_i (mu_i - target) / sigma_i^2
    dmu = gamma[:, None] * (mu - target[None, :]) / (sigma**2)[:, None]
    # scales through sigma = exp(raw) + floor
    r2 = np.sum((target[None, :] - mu) ** 2, axis=1)
    dsigma = gamma * (d / sigma - r2 / sigma**3)
    draw = dsigma * (sigma - SIGMA_FLOOR)
    grad_w = {
        "mdn.Wa": np.outer(dlogits, h),
        "mdn.ba": dlogits,
        "mdn.Ws": np.outer(draw, h),
        "mdn.bs": draw,
        "mdn.Wm": np.outer(dmu.ravel(), h),
        "mdn.bm": dmu.ravel(),
    }
    grad_h = w.Wa.T @ dlogits + w.Ws.T @ draw + w.Wm.T @ dmu.ravel()
    return grad_h, grad_w


def mdn_sample(params, rng=None, mode="deterministic"):
    """Draw from the mixture.

    deterministic: mean of the highest-weight component (ties -> lowest index).
    stochastic: sample component from alpha then draw N(mu_i, sigma_i^2 I)."""
    if mode == "deterministic":
        return params.mu[int(np.argmax(params.alpha))].copy()
    if mode != "stochastic":
        raise CoreError(f"unknown sampling mode {mode!r}")
    if rng is None:
        raise CoreError("stochastic sampling needs an Rng")
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(params.alpha), u))
    idx = min(idx, params.alpha.size - 1)
    d = params.mu.shape[1]
    noise = rng.normal_vector(d)
    return params.mu[idx] + params.sigma[idx] * noise


# Plain linear head used by the LSTM-only ablation variants: predicts the
# target directly, trained with squared error.

class LinearHead:
    def __init__(self, W, b):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.hidden = self.W.shape[1]
        self.d = self.W.shape[0]

    def params(self, prefix="head"):
        return {prefix + ".W": self.W, prefix + ".b": self.b}


def init_linear_head(hidden, dim, rng):
    s = 1.0 / np.sqrt(hidden)
    return LinearHead(rng.uniform(-s, s, (dim, hidden)), np.zeros(dim))


def linear_forward(h, head):
    return head.W @ h + head.b


def linear_loss_backward(h, head, target):
    """Squared-error loss ||Wh+b - target||^2; returns (loss, grad_h, grad_w)."""
    out = head.W @ h + head.b
    diff = out - target
    loss = float(np.sum(diff**2))
    grad_w = {"head.W": np.outer(2 * diff, h), "head.b": 2 * diff}
    grad_h = head.W.T @ (2 * diff)
    return loss, grad_h, grad_w

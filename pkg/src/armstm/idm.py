"""Inverse dynamics model: a feedforward mixture-density network that maps
a short state/action history plus the desired next state to joint torques,
trained on random-excitation transitions and used to track STM trajectories
at a higher control frequency.

Each action dimension gets its own scalar Gaussian mixture head; hidden
layers use tanh.  Training is vectorized over minibatches.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import arm as arm_world
from . import stm as stm_mod
from .core import CoreError, DictAdam, Rng, clip_global_norm
from .mdn import SIGMA_FLOOR, MixtureParams

IDM_CHECKPOINT_VERSION = 1


class IdmError(RuntimeError):
    pass


@dataclass
class IdmConfig:
    history: int = 2
    hidden: tuple = (64, 64, 64)
    mixtures: int = 5
    substeps: int = 10
    lr: float = 1e-3
    iterations: int = 3000
    batch: int = 64
    clip_norm: float = 5.0
    torque_range: float = 2.0
    episode_len: int = 40
    seed: int = 0

    def to_dict(self):
        d = self.__dict__.copy()
        d["hidden"] = list(self.hidden)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (64, 64, 64)))
        return IdmConfig(**d)


@dataclass
class Transition:
    qs: np.ndarray       # (H+1, n) joint positions, oldest first
    qdots: np.ndarray    # (H+1, n)
    actions: np.ndarray  # (H, n) previous torques
    action: np.ndarray   # (n,)  torque taken at t (the label)
    next_q: np.ndarray
    next_qdot: np.ndarray


def encode_transition_input(qs, qdots, actions, next_q, next_qdot):
    return np.concatenate(
        [np.ravel(qs), np.ravel(qdots), np.ravel(actions), next_q, next_qdot]
    )


def input_dim(n, history):
    return (history + 1) * 2 * n + history * n + 2 * n


def collect_transitions(arm, count, rng, history=2, torque_range=2.0, episode_len=40):
    """Seeded random-torque excitation of step_dynamics; histories are
    zero-padded before step H."""
    if count < 1:
        raise CoreError("count must be >= 1")
    n = arm.n
    out = []
    ep = 0
    while len(out) < count:
        erng = rng.derive(ep)
        ep += 1
        q = erng.uniform(-np.pi, np.pi, n)
        s = arm_world.ArmState(q=q, qdot=np.zeros(n))
        qs, qdots, taus = [s.q.copy()], [s.qdot.copy()], []
        for _ in range(episode_len):
            tau = erng.uniform(-torque_range, torque_range, n)
            s = arm_world.step_dynamics(s, tau, arm)
            taus.append(tau)
            qs.append(s.q.copy())
            qdots.append(s.qdot.copy())
        for t in range(episode_len):
            if len(out) >= count:
                break
            hq = np.zeros((history + 1, n))
            hqd = np.zeros((history + 1, n))
            ha = np.zeros((history, n))
            for k in range(history + 1):
                src = t - history + k
                if src >= 0:
                    hq[k] = qs[src]
                    hqd[k] = qdots[src]
            for k in range(history):
                src = t - history + k
                if src >= 0:
                    ha[k] = taus[src]
            out.append(Transition(qs=hq, qdots=hqd, actions=ha,
                                  action=taus[t], next_q=qs[t + 1],
                                  next_qdot=qdots[t + 1]))
    return out


# ---------------------------------------------------------------------------
# network

class IdmWeights:
    """Tanh hidden layers, then per-action-dimension mixture heads."""

    def __init__(self, hidden_layers, Wa, ba, Ws, bs, Wm, bm, n_dims, mixtures):
        self.hidden_layers = [(np.asarray(W, dtype=np.float64),
                               np.asarray(b, dtype=np.float64))
                              for W, b in hidden_layers]
        self.Wa, self.ba = np.asarray(Wa), np.asarray(ba)
        self.Ws, self.bs = np.asarray(Ws), np.asarray(bs)
        self.Wm, self.bm = np.asarray(Wm), np.asarray(bm)
        self.n_dims = n_dims
        self.m = mixtures

    def params(self):
        out = {}
        for i, (W, b) in enumerate(self.hidden_layers):
            out[f"h{i}.W"] = W
            out[f"h{i}.b"] = b
        out.update({"Wa": self.Wa, "ba": self.ba, "Ws": self.Ws, "bs": self.bs,
                    "Wm": self.Wm, "bm": self.bm})
        return out

    def set_params(self, p):
        for i in range(len(self.hidden_layers)):
            self.hidden_layers[i] = (p[f"h{i}.W"], p[f"h{i}.b"])
        self.Wa, self.ba = p["Wa"], p["ba"]
        self.Ws, self.bs = p["Ws"], p["bs"]
        self.Wm, self.bm = p["Wm"], p["bm"]


def init_idm(in_dim, cfg, n_dims, rng):
    layers = []
    d = in_dim
    for h in cfg.hidden:
        s = 1.0 / np.sqrt(d)
        layers.append((rng.uniform(-s, s, (h, d)), np.zeros(h)))
        d = h
    s = 1.0 / np.sqrt(d)
    nm = n_dims * cfg.mixtures
    return IdmWeights(
        layers,
        rng.uniform(-s, s, (nm, d)), np.zeros(nm),
        rng.uniform(-s, s, (nm, d)), np.zeros(nm),
        rng.uniform(-s, s, (nm, d)), np.zeros(nm),
        n_dims, cfg.mixtures,
    )


def _forward_batch(X, w):
    """X: (B, in_dim).  Returns (alpha, mu, sigma) each (B, n_dims, m),
    plus the per-layer activations for backprop."""
    acts = [X]
    a = X
    for W, b in w.hidden_layers:
        a = np.tanh(a @ W.T + b)
        acts.append(a)
    B = X.shape[0]
    logits = (a @ w.Wa.T + w.ba).reshape(B, w.n_dims, w.m)
    raw = (a @ w.Ws.T + w.bs).reshape(B, w.n_dims, w.m)
    mu = (a @ w.Wm.T + w.bm).reshape(B, w.n_dims, w.m)
    shifted = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    alpha = e / e.sum(axis=2, keepdims=True)
    sigma = np.exp(raw) + SIGMA_FLOOR
    return alpha, mu, sigma, acts


def idm_forward(x, w):
    """Single input vector -> one scalar MixtureParams per action dimension."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (w.hidden_layers[0][0].shape[1],):
        raise CoreError("idm_forward input dimension mismatch")
    alpha, mu, sigma, _ = _forward_batch(x[None, :], w)
    return [
        MixtureParams(alpha[0, j], mu[0, j][:, None], sigma[0, j])
        for j in range(w.n_dims)
    ]


def _loss_and_grads(X, Y, w):
    """Mean over the batch of the summed per-dimension NLL; exact grads."""
    B = X.shape[0]
    alpha, mu, sigma, acts = _forward_batch(X, w)
    t = Y[:, :, None]
    r2 = (t - mu) ** 2
    log_n = -0.5 * np.log(2 * np.pi) - np.log(sigma) - r2 / (2 * sigma**2)
    logc = np.log(alpha) + log_n
    mx = logc.max(axis=2, keepdims=True)
    lse = mx + np.log(np.exp(logc - mx).sum(axis=2, keepdims=True))
    loss = float(-np.sum(lse) / B)
    gamma = np.exp(logc - lse)
    dlogits = (alpha - gamma) / B
    dmu = gamma * (mu - t) / sigma**2 / B
    dsig = gamma * (1.0 / sigma - r2 / sigma**3) / B
    draw = dsig * (sigma - SIGMA_FLOOR)
    a = acts[-1]
    fl = lambda z: z.reshape(B, -1)
    grads = {
        "Wa": fl(dlogits).T @ a, "ba": fl(dlogits).sum(axis=0),
        "Ws": fl(draw).T @ a, "bs": fl(draw).sum(axis=0),
        "Wm": fl(dmu).T @ a, "bm": fl(dmu).sum(axis=0),
    }
    da = fl(dlogits) @ w.Wa + fl(draw) @ w.Ws + fl(dmu) @ w.Wm
    for i in range(len(w.hidden_layers) - 1, -1, -1):
        W, _ = w.hidden_layers[i]
        dz = da * (1.0 - acts[i + 1] ** 2)
        grads[f"h{i}.W"] = dz.T @ acts[i]
        grads[f"h{i}.b"] = dz.sum(axis=0)
        da = dz @ W
    return loss, grads


@dataclass
class IdmCheckpoint:
    cfg: IdmConfig
    weights: IdmWeights
    in_mean: np.ndarray
    in_std: np.ndarray
    n_joints: int
    loss_curve: list = field(default_factory=list)
    version: int = IDM_CHECKPOINT_VERSION


def train_idm(transitions, cfg):
    """Minibatch Adam on the summed per-dimension NLL."""
    if not transitions:
        raise IdmError("no transitions")
    n = transitions[0].action.shape[0]
    X = np.asarray([
        encode_transition_input(tr.qs, tr.qdots, tr.actions, tr.next_q, tr.next_qdot)
        for tr in transitions
    ])
    Y = np.asarray([tr.action for tr in transitions])
    in_mean = X.mean(axis=0)
    in_std = np.maximum(X.std(axis=0), 1e-8)
    Xn = (X - in_mean) / in_std
    rng = Rng(cfg.seed)
    w = init_idm(X.shape[1], cfg, n, rng)
    params = w.params()
    opt = DictAdam({k: p.shape for k, p in params.items()}, lr=cfg.lr)
    loss_curve = []
    N = X.shape[0]
    for it in range(cfg.iterations):
        idx = np.array([rng.integers(N) for _ in range(min(cfg.batch, N))])
        loss, grads = _loss_and_grads(Xn[idx], Y[idx], w)
        if not np.isfinite(loss):
            raise IdmError(f"non-finite loss at iteration {it}")
        grads, _ = clip_global_norm(grads, cfg.clip_norm)
        params = opt.step(params, grads)
        w.set_params(params)
        loss_curve.append(loss)
    return IdmCheckpoint(cfg=cfg, weights=w, in_mean=in_mean, in_std=in_std,
                         n_joints=n, loss_curve=loss_curve)


def idm_action(ckpt, qs, qdots, actions, next_q, next_qdot):
    """Deterministic-mode torque: per dimension, the mean of the
    highest-weight component."""
    x = encode_transition_input(qs, qdots, actions, next_q, next_qdot)
    xn = (x - ckpt.in_mean) / ckpt.in_std
    alpha, mu, _, _ = _forward_batch(xn[None, :], ckpt.weights)
    idx = np.argmax(alpha[0], axis=1)
    return mu[0][np.arange(ckpt.n_joints), idx]


# ---------------------------------------------------------------------------
# tracking

def track(desired_q, idm_ckpt, arm, substeps=10, oracle=False, history=None):
    """Follow a joint trajectory (T+1, n) with torque control at
    `substeps` times the trajectory's rate.

    oracle=True uses the analytic inverse of the dynamics instead of the
    learned model, which isolates pipeline error from learning error.
    Returns (executed (T+1, n) joint positions at the trajectory rate,
    per-step tracking error norms, torque log (T*substeps, n))."""
    desired_q = np.asarray(desired_q, dtype=np.float64)
    if substeps < 1:
        raise CoreError("substeps must be >= 1")
    n = arm.n
    H = idm_ckpt.cfg.history if idm_ckpt is not None else (history or 2)
    s = arm_world.ArmState(q=desired_q[0].copy(), qdot=np.zeros(n))
    hq = np.zeros((H + 1, n))
    hqd = np.zeros((H + 1, n))
    ha = np.zeros((H, n))
    hq[-1], hqd[-1] = s.q, s.qdot
    executed = [s.q.copy()]
    errors = []
    torques = []
    T = desired_q.shape[0] - 1
    for t in range(T):
        q_from, q_to = desired_q[t], desired_q[t + 1]
        qdot_des = (q_to - q_from) / (substeps * arm.dt)
        for k in range(substeps):
            q_target = q_from + (k + 1) / substeps * (q_to - q_from)
            if oracle:
                qdot_needed = (q_target - s.q) / arm.dt
                tau = arm_world.inverse_dynamics(s.qdot, qdot_needed, arm)
            else:
                tau = idm_action(idm_ckpt, hq, hqd, ha, q_target, qdot_des)
            s = arm_world.step_dynamics(s, tau, arm)
            if not np.all(np.isfinite(s.q)):
                raise IdmError(f"dynamics diverged at step {t}.{k}")
            torques.append(tau)
            hq = np.vstack([hq[1:], s.q])
            hqd = np.vstack([hqd[1:], s.qdot])
            ha = np.vstack([ha[1:], tau]) if H > 0 else ha
        executed.append(s.q.copy())
        err = float(np.linalg.norm(s.q - q_to))
        if not np.isfinite(err):
            raise IdmError(f"non-finite tracking error at step {t}")
        errors.append(err)
    return np.asarray(executed), errors, np.asarray(torques)


# ---------------------------------------------------------------------------
# persistence (same structured-text format as STM checkpoints, kind "idm")

def _arr(a):
    return np.asarray(a).tolist()


def save_idm_checkpoint(ckpt, path):
    doc = {
        "version": ckpt.version,
        "kind": "idm",
        "cfg": ckpt.cfg.to_dict(),
        "n_joints": ckpt.n_joints,
        "in_mean": _arr(ckpt.in_mean),
        "in_std": _arr(ckpt.in_std),
        "hidden_layers": [{"W": _arr(W), "b": _arr(b)}
                          for W, b in ckpt.weights.hidden_layers],
        "heads": {k: _arr(getattr(ckpt.weights, k))
                  for k in ("Wa", "ba", "Ws", "bs", "Wm", "bm")},
        "loss_curve": ckpt.loss_curve,
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def load_idm_checkpoint(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise IdmError(f"corrupt IDM checkpoint {path}: {e}") from e
    if doc.get("version") != IDM_CHECKPOINT_VERSION:
        raise IdmError(f"IDM checkpoint version mismatch: {doc.get('version')}")
    if doc.get("kind") != "idm":
        raise IdmError(f"not an IDM checkpoint: kind={doc.get('kind')!r}")
    cfg = IdmConfig.from_dict(doc["cfg"])
    hd = doc["heads"]
    w = IdmWeights(
        [(np.array(l["W"]), np.array(l["b"])) for l in doc["hidden_layers"]],
        np.array(hd["Wa"]), np.array(hd["ba"]),
        np.array(hd["Ws"]), np.array(hd["bs"]),
        np.array(hd["Wm"]), np.array(hd["bm"]),
        doc["n_joints"], cfg.mixtures,
    )
    return IdmCheckpoint(cfg=cfg, weights=w, in_mean=np.array(doc["in_mean"]),
                         in_std=np.array(doc["in_std"]),
                         n_joints=doc["n_joints"], loss_curve=doc["loss_curve"])

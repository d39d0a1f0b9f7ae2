"""State transition model: state encoding, the auto-conditioned training
schedule, the BPTT training loop, rollout with online goal changes, and
dataset / checkpoint persistence.

A state is (dq, phi, psi[, grip]): joint-angle deltas, the task-specific
input (e.g. EE position relative to the goal), the task description
(e.g. goal coordinates or a circle radius) and an optional gripper scalar.
The model predicts dq (+ grip); phi and psi are recomputed from integrated
kinematics during self-fed steps and rollout, never copied from the expert.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import arm as arm_world
from . import lstm, mdn
from .core import CoreError, DictAdam, Rng, clip_global_norm

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1
STD_FLOOR = 1e-8


class StmError(RuntimeError):
    pass


@dataclass
class State:
    dq: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    grip: float | None = None

    def flat(self):
        parts = [self.dq, self.phi, self.psi]
        if self.grip is not None:
            parts.append(np.array([self.grip]))
        return np.concatenate(parts)


@dataclass
class Layout:
    n_dq: int
    n_phi: int
    n_psi: int
    has_grip: bool = False

    @property
    def total(self):
        return self.n_dq + self.n_phi + self.n_psi + (1 if self.has_grip else 0)

    @property
    def n_pred(self):
        """Dimensions the model predicts: dq (+ grip)."""
        return self.n_dq + (1 if self.has_grip else 0)

    def split(self, vec):
        i = self.n_dq
        j = i + self.n_phi
        k = j + self.n_psi
        grip = float(vec[k]) if self.has_grip else None
        return State(dq=vec[:i].copy(), phi=vec[i:j].copy(), psi=vec[j:k].copy(), grip=grip)

    def to_dict(self):
        return {"n_dq": self.n_dq, "n_phi": self.n_phi, "n_psi": self.n_psi,
                "has_grip": self.has_grip}

    @staticmethod
    def from_dict(d):
        return Layout(d["n_dq"], d["n_phi"], d["n_psi"], d["has_grip"])

    @staticmethod
    def of(state):
        return Layout(len(state.dq), len(state.phi), len(state.psi),
                      state.grip is not None)


@dataclass
class Trajectory:
    states: list
    task: arm_world.TaskSpec
    q0: np.ndarray

    @property
    def layout(self):
        return Layout.of(self.states[0])

    def joint_angles(self):
        """Absolute q at every step: state 0 sits at q0 (its dq is the delta
        into step 0, zero for demos), later steps add the cumulative dq."""
        dqs = np.asarray([s.dq for s in self.states])
        cums = np.cumsum(dqs, axis=0)
        return self.q0[None, :] + (cums - cums[0:1])

    def __len__(self):
        return len(self.states)


def _qabs(traj):
    """Cached absolute joint angles; the training loop hits this per step."""
    if not hasattr(traj, "_qabs"):
        traj._qabs = traj.joint_angles()
    return traj._qabs


# ---------------------------------------------------------------------------
# schedule

@dataclass
class ScheduleConfig:
    u: int = 5  # ground-truth steps per period
    v: int = 5  # self-fed steps per period

    def __post_init__(self):
        if self.u < 0 or self.v < 0 or self.u + self.v < 1:
            raise CoreError(f"bad schedule u={self.u} v={self.v}")


def conditioning_mask(t, sched):
    """'ground_truth' for the first u steps of each period of length u+v,
    'self_fed' for the remaining v."""
    if t < 0:
        raise CoreError("negative step index")
    if sched.v == 0:
        return "ground_truth"
    if sched.u == 0:
        return "self_fed"
    return "ground_truth" if t % (sched.u + sched.v) < sched.u else "self_fed"


# ---------------------------------------------------------------------------
# configuration and checkpoint

@dataclass
class StmConfig:
    layers: int = 3
    hidden: int = 64
    mixtures: int = 3
    lr: float = 1e-3
    iterations: int = 5000
    clip_norm: float = 1.0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0
    normalize: bool = True
    head: str = "mdn"  # "mdn" | "linear" (squared-error ablation)
    stochastic_self_feed: bool = False

    def to_dict(self):
        d = self.__dict__.copy()
        d["schedule"] = {"u": self.schedule.u, "v": self.schedule.v}
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        sched = d.pop("schedule", {"u": 5, "v": 5})
        return StmConfig(schedule=ScheduleConfig(sched["u"], sched["v"]), **d)


@dataclass
class NormStats:
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray


@dataclass
class ModelCheckpoint:
    cfg: StmConfig
    layout: Layout
    layers: list          # LstmLayerWeights
    head: object          # MdnWeights or LinearHead
    norm: NormStats
    loss_curve: list
    version: int = CHECKPOINT_VERSION


# ---------------------------------------------------------------------------
# encoding

def compute_norm_stats(dataset, layout, enabled=True):
    flats = np.asarray([s.flat() for tr in dataset for s in tr.states])
    preds = np.asarray([_pred_target(s, layout) for tr in dataset for s in tr.states])
    if not enabled:
        return NormStats(np.zeros(layout.total), np.ones(layout.total),
                         np.zeros(layout.n_pred), np.ones(layout.n_pred))
    return NormStats(
        in_mean=flats.mean(axis=0),
        in_std=np.maximum(flats.std(axis=0), STD_FLOOR),
        out_mean=preds.mean(axis=0),
        out_std=np.maximum(preds.std(axis=0), STD_FLOOR),
    )


def encode_input(state, norm, layout):
    vec = state.flat()
    if vec.shape != norm.in_mean.shape:
        raise CoreError("state layout does not match normalization stats")
    return (vec - norm.in_mean) / norm.in_std


def decode_input(vec, norm, layout):
    return layout.split(vec * norm.in_std + norm.in_mean)


def _pred_target(state, layout):
    """Raw predicted dimensions of a state: dq (+ grip)."""
    if layout.has_grip:
        return np.concatenate([state.dq, [state.grip]])
    return state.dq.copy()


def encode_target(state, norm, layout):
    return (_pred_target(state, layout) - norm.out_mean) / norm.out_std


def decode_prediction(vec, norm, layout):
    """Standardized prediction -> (dq, grip)."""
    raw = vec * norm.out_std + norm.out_mean
    if layout.has_grip:
        return raw[: layout.n_dq], float(np.clip(raw[-1], 0.0, 1.0))
    return raw, None


# ---------------------------------------------------------------------------
# feedback recomputation

def recompute_feedback(pred_dq, running_q, task, arm, grip=None):
    """Integrate the predicted joint delta and rebuild (phi, psi) from the
    arm's kinematics and the task's *current* goal.  Returns (state, q)."""
    q = running_q + pred_dq
    ee = arm_world.forward_kinematics(q, arm)
    if task.kind == "reacher":
        phi, psi = ee - task.goal, task.goal.copy()
    elif task.kind == "circle":
        phi, psi = ee.copy(), np.array([task.radius])
    elif task.kind == "pick_place":
        phi, psi = ee - task.goal, task.goal.copy()
    else:
        raise CoreError(f"unknown task kind {task.kind!r}")
    return State(dq=pred_dq.copy(), phi=phi, psi=psi, grip=grip), q


# ---------------------------------------------------------------------------
# training

def _init_model(cfg, layout, rng):
    layers = lstm.init_stack(layout.total, cfg.hidden, cfg.layers, rng)
    if cfg.head == "mdn":
        head = mdn.init_mdn(cfg.hidden, cfg.mixtures, layout.n_pred, rng)
    elif cfg.head == "linear":
        head = mdn.init_linear_head(cfg.hidden, layout.n_pred, rng)
    else:
        raise CoreError(f"unknown head {cfg.head!r}")
    return layers, head


def _all_params(layers, head):
    out = {}
    for i, l in enumerate(layers):
        out.update(l.params(f"lstm{i}"))
    out.update(head.params())
    return out


def _set_params(layers, head, params):
    for i, l in enumerate(layers):
        l.W, l.U, l.b = params[f"lstm{i}.W"], params[f"lstm{i}.U"], params[f"lstm{i}.b"]
    if isinstance(head, mdn.MdnWeights):
        head.Wa, head.ba = params["mdn.Wa"], params["mdn.ba"]
        head.Ws, head.bs = params["mdn.Ws"], params["mdn.bs"]
        head.Wm, head.bm = params["mdn.Wm"], params["mdn.bm"]
    else:
        head.W, head.b = params["head.W"], params["head.b"]


def _unroll_loss(traj, layers, head, norm, layout, cfg, arm, rng):
    """Forward pass over one trajectory under the conditioning schedule.

    Returns (mean step loss, per-step top-hidden grads, caches, head grads)
    with gradients already accumulated for the head.  Self-fed inputs are
    treated as constants: no gradient flows through the feedback path."""
    T = len(traj.states)
    states0 = lstm.zero_state(layers)
    caches, step_grads = [], []
    head_grads = None
    running_q = traj.q0.copy()
    prev_pred = None  # (dq, grip)
    loss_total = 0.0
    cur = states0
    sample_mode = "stochastic" if cfg.stochastic_self_feed else "deterministic"
    for t in range(T - 1):
        if conditioning_mask(t, cfg.schedule) == "ground_truth" or prev_pred is None:
            inp = traj.states[t]
            running_q = _qabs(traj)[t].copy()
        else:
            # take the goal from the demo's own state at this step so demos
            # whose goal changes mid-sequence stay consistent
            task_t = traj.task
            if task_t.kind != "circle":
                task_t = replace(task_t, goal=traj.states[t].psi.copy())
            inp, running_q = recompute_feedback(
                prev_pred[0], running_q, task_t, arm, grip=prev_pred[1]
            )
        x = encode_input(inp, norm, layout)
        h_top, cur, cache = lstm.stack_forward(x, cur, layers)
        target = encode_target(traj.states[t + 1], norm, layout)
        if isinstance(head, mdn.MdnWeights):
            params, mcache = mdn.mdn_forward(h_top, head)
            loss = mdn.mdn_nll(params, target)
            gh, gw = mdn.mdn_backward(params, target, mcache, head)
            pred = mdn.mdn_sample(params, rng, sample_mode)
        else:
            loss, gh, gw = mdn.linear_loss_backward(h_top, head, target)
            pred = mdn.linear_forward(h_top, head)
        loss_total += loss
        caches.append(cache)
        step_grads.append(gh)
        if head_grads is None:
            head_grads = gw
        else:
            for k in gw:
                head_grads[k] += gw[k]
        prev_pred = decode_prediction(pred, norm, layout)
    n_steps = T - 1
    scale = 1.0 / n_steps
    step_grads = [g * scale for g in step_grads]
    head_grads = {k: g * scale for k, g in head_grads.items()}
    return loss_total * scale, step_grads, caches, head_grads


def _lr_scale(frac):
    """Cosine decay over training progress (floored at 2%): the long
    low-learning-rate tail sharpens the near-goal fit that the slow end of
    each reach depends on."""
    return max(0.5 * (1.0 + np.cos(np.pi * frac)), 0.02)


def train(dataset, cfg, arm):
    """Train the STM: one uniformly sampled trajectory per iteration, full
    BPTT, global-norm gradient clipping, one Adam step."""
    if not dataset:
        raise StmError("empty dataset")
    layout = dataset[0].layout
    for tr in dataset:
        if tr.layout != layout:
            raise StmError("trajectories have mixed state layouts")
    rng = Rng(cfg.seed)
    norm = compute_norm_stats(dataset, layout, enabled=cfg.normalize)
    layers, head = _init_model(cfg, layout, rng)
    params = _all_params(layers, head)
    opt = DictAdam({k: p.shape for k, p in params.items()}, lr=cfg.lr)
    loss_curve = []
    for it in range(cfg.iterations):
        for st in opt.states.values():
            st.lr = cfg.lr * _lr_scale(it / cfg.iterations)
        tr = dataset[rng.integers(len(dataset))]
        loss, step_grads, caches, grads = _unroll_loss(
            tr, layers, head, norm, layout, cfg, arm, rng
        )
        if not np.isfinite(loss):
            raise StmError(f"non-finite loss at iteration {it}")
        wgrads, _ = lstm.stack_backward_through_time(step_grads, caches, layers)
        for i, g in enumerate(wgrads):
            for k in g:
                grads[f"lstm{i}.{k}"] = g[k]
        grads, _ = clip_global_norm(grads, cfg.clip_norm)
        params = opt.step(params, grads)
        _set_params(layers, head, params)
        loss_curve.append(float(loss))
    return ModelCheckpoint(cfg=cfg, layout=layout, layers=layers, head=head,
                           norm=norm, loss_curve=loss_curve)


# ---------------------------------------------------------------------------
# rollout

def rollout(ckpt, q0, task, T, goal_schedule=(), arm=None, rng=None,
            stochastic=False):
    """Unroll the model for T self-fed steps from q0.

    goal_schedule: iterable of (step, TaskSpec-update) pairs with strictly
    increasing steps; at each scheduled step the task goal is replaced
    before the state is encoded.  Returns a Trajectory of T+1 states whose
    task carries the final goal."""
    if T < 1:
        raise StmError("rollout needs T >= 1")
    steps = [s for s, _ in goal_schedule]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise StmError("goal_schedule steps must be strictly increasing")
    task = arm_world.TaskSpec.from_dict(task.to_dict())  # private copy
    sched = dict(goal_schedule)
    layout, norm = ckpt.layout, ckpt.norm
    mode = "stochastic" if stochastic else "deterministic"
    if stochastic and rng is None:
        rng = Rng(0)
    q = np.asarray(q0, dtype=np.float64).copy()
    grip0 = 0.0 if layout.has_grip else None
    state, q = recompute_feedback(np.zeros(layout.n_dq), q, task, arm, grip=grip0)
    cur = lstm.zero_state(ckpt.layers)
    out_states = [state]
    for t in range(T):
        if t in sched:
            new_goal = np.asarray(sched[t], dtype=np.float64)
            if task.kind == "circle":
                task.radius = float(new_goal[0])
            else:
                task.goal = new_goal
            s = out_states[-1]
            state, _ = recompute_feedback(np.zeros(layout.n_dq), q, task, arm,
                                          grip=s.grip)
            state = State(dq=s.dq, phi=state.phi, psi=state.psi, grip=s.grip)
            out_states[-1] = state
        x = encode_input(state, norm, layout)
        h_top, cur, _ = lstm.stack_forward(x, cur, ckpt.layers)
        if isinstance(ckpt.head, mdn.MdnWeights):
            params, _ = mdn.mdn_forward(h_top, ckpt.head)
            pred = mdn.mdn_sample(params, rng, mode)
        else:
            pred = mdn.linear_forward(h_top, ckpt.head)
        dq, grip = decode_prediction(pred, norm, layout)
        if not np.all(np.isfinite(dq)):
            raise StmError(f"non-finite prediction at rollout step {t}")
        state, q = recompute_feedback(dq, q, task, arm, grip=grip)
        out_states.append(state)
    return Trajectory(states=out_states, task=task, q0=np.asarray(q0, dtype=np.float64))


# ---------------------------------------------------------------------------
# persistence

def _arr(a):
    return np.asarray(a).tolist()


def save_dataset(path, dataset, arm):
    with open(path, "w") as f:
        for tr in dataset:
            rec = {
                "version": DATASET_VERSION,
                "layout": tr.layout.to_dict(),
                "task": tr.task.to_dict(),
                "arm": arm.to_dict(),
                "q0": _arr(tr.q0),
                "states": [_arr(s.flat()) for s in tr.states],
            }
            f.write(json.dumps(rec) + "\n")


def load_dataset(path):
    """Returns (trajectories, ArmConfig)."""
    dataset, arm = [], None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            layout = Layout.from_dict(rec["layout"])
            states = [layout.split(np.asarray(v, dtype=np.float64))
                      for v in rec["states"]]
            dataset.append(Trajectory(
                states=states,
                task=arm_world.TaskSpec.from_dict(rec["task"]),
                q0=np.asarray(rec["q0"], dtype=np.float64),
            ))
            arm = arm_world.ArmConfig.from_dict(rec["arm"])
    if not dataset:
        raise StmError(f"no trajectories in {path}")
    return dataset, arm


def save_checkpoint(ckpt, path):
    doc = {
        "version": ckpt.version,
        "kind": "stm",
        "cfg": ckpt.cfg.to_dict(),
        "layout": ckpt.layout.to_dict(),
        "norm": {
            "in_mean": _arr(ckpt.norm.in_mean), "in_std": _arr(ckpt.norm.in_std),
            "out_mean": _arr(ckpt.norm.out_mean), "out_std": _arr(ckpt.norm.out_std),
        },
        "layers": [
            {"W": _arr(l.W), "U": _arr(l.U), "b": _arr(l.b)} for l in ckpt.layers
        ],
        "loss_curve": ckpt.loss_curve,
    }
    if isinstance(ckpt.head, mdn.MdnWeights):
        doc["head"] = {
            "type": "mdn", "m": ckpt.head.m, "d": ckpt.head.d,
            "Wa": _arr(ckpt.head.Wa), "ba": _arr(ckpt.head.ba),
            "Ws": _arr(ckpt.head.Ws), "bs": _arr(ckpt.head.bs),
            "Wm": _arr(ckpt.head.Wm), "bm": _arr(ckpt.head.bm),
        }
    else:
        doc["head"] = {"type": "linear", "W": _arr(ckpt.head.W),
                       "b": _arr(ckpt.head.b)}
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def load_checkpoint(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise StmError(f"corrupt checkpoint {path}: {e}") from e
    if doc.get("version") != CHECKPOINT_VERSION:
        raise StmError(f"checkpoint version mismatch: {doc.get('version')}")
    if doc.get("kind") != "stm":
        raise StmError(f"not an STM checkpoint: kind={doc.get('kind')!r}")
    cfg = StmConfig.from_dict(doc["cfg"])
    layout = Layout.from_dict(doc["layout"])
    layers = [
        lstm.LstmLayerWeights(np.array(l["W"]), np.array(l["U"]), np.array(l["b"]))
        for l in doc["layers"]
    ]
    hd = doc["head"]
    if hd["type"] == "mdn":
        head = mdn.MdnWeights(
            np.array(hd["Wa"]), np.array(hd["ba"]), np.array(hd["Ws"]),
            np.array(hd["bs"]), np.array(hd["Wm"]), np.array(hd["bm"]),
            hd["m"], hd["d"],
        )
    else:
        head = mdn.LinearHead(np.array(hd["W"]), np.array(hd["b"]))
    nm = doc["norm"]
    norm = NormStats(np.array(nm["in_mean"]), np.array(nm["in_std"]),
                     np.array(nm["out_mean"]), np.array(nm["out_std"]))
    return ModelCheckpoint(cfg=cfg, layout=layout, layers=layers, head=head,
                           norm=norm, loss_curve=doc["loss_curve"])

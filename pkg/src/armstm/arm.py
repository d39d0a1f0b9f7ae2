"""Planar n-DoF arm world: forward kinematics, damped-least-squares IK
(the demonstration expert), per-joint double-integrator dynamics, task demo
generators and success checks.

The default arm has 3 links (0.5, 0.3, 0.2) m, so workspace distances are
on the same scale as the 0.05 m reaching-success threshold.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import CoreError

DQ_CLIP = None  # joint limits are optional and off by default


class IkError(RuntimeError):
    def __init__(self, msg, q=None, residual=None):
        super().__init__(msg)
        self.q = q
        self.residual = residual


@dataclass
class ArmConfig:
    link_lengths: tuple = (0.5, 0.3, 0.2)
    inertia: float = 1.0      # kg m^2, per joint
    damping: float = 0.5      # N m s / rad, viscous
    dt: float = 0.01          # s
    joint_limits: tuple | None = None

    @property
    def n(self):
        return len(self.link_lengths)

    @property
    def reach(self):
        return float(sum(self.link_lengths))

    def to_dict(self):
        return {
            "link_lengths": list(self.link_lengths),
            "inertia": self.inertia,
            "damping": self.damping,
            "dt": self.dt,
        }

    @staticmethod
    def from_dict(d):
        return ArmConfig(
            link_lengths=tuple(d["link_lengths"]),
            inertia=float(d.get("inertia", 1.0)),
            damping=float(d.get("damping", 0.5)),
            dt=float(d.get("dt", 0.01)),
        )


@dataclass
class ArmState:
    q: np.ndarray
    qdot: np.ndarray


@dataclass
class TaskSpec:
    kind: str                      # reacher | circle | pick_place
    goal: np.ndarray | None = None  # Cartesian goal (reacher/pick_place)
    radius: float | None = None     # circle
    center: np.ndarray | None = None
    waypoints: list = field(default_factory=list)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.goal is not None:
            d["goal"] = [float(v) for v in self.goal]
        if self.radius is not None:
            d["radius"] = float(self.radius)
        if self.center is not None:
            d["center"] = [float(v) for v in self.center]
        if self.waypoints:
            d["waypoints"] = [[float(v) for v in w] for w in self.waypoints]
        return d

    @staticmethod
    def from_dict(d):
        return TaskSpec(
            kind=d["kind"],
            goal=np.asarray(d["goal"], dtype=np.float64) if "goal" in d else None,
            radius=d.get("radius"),
            center=np.asarray(d["center"], dtype=np.float64) if "center" in d else None,
            waypoints=[np.asarray(w, dtype=np.float64) for w in d.get("waypoints", [])],
        )


def forward_kinematics(q, arm):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (arm.n,):
        raise CoreError(f"fk: expected {arm.n} joints, got {q.shape}")
    angles = np.cumsum(q)
    L = np.asarray(arm.link_lengths)
    return np.array([np.sum(L * np.cos(angles)), np.sum(L * np.sin(angles))])


def jacobian(q, arm):
    """Analytic 2 x n Jacobian of forward_kinematics."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (arm.n,):
        raise CoreError(f"jacobian: expected {arm.n} joints, got {q.shape}")
    angles = np.cumsum(q)
    L = np.asarray(arm.link_lengths)
    J = np.zeros((2, arm.n))
    for j in range(arm.n):
        J[0, j] = -np.sum(L[j:] * np.sin(angles[j:]))
        J[1, j] = np.sum(L[j:] * np.cos(angles[j:]))
    return J


def ik_solve(target, q_init, arm, tol=1e-4, max_iters=200, lam=0.1, step_clamp=0.02):
    """Damped least squares: dq = J^T (J J^T + lam^2 I)^-1 err, with the
    Cartesian error clamped to step_clamp per iteration."""
    target = np.asarray(target, dtype=np.float64)
    q = np.asarray(q_init, dtype=np.float64).copy()
    damp = lam**2 * np.eye(2)
    best_q, best_res = q.copy(), np.linalg.norm(forward_kinematics(q, arm) - target)
    for _ in range(max_iters):
        err = target - forward_kinematics(q, arm)
        res = np.linalg.norm(err)
        if res < best_res:
            best_q, best_res = q.copy(), res
        if res < tol:
            return q
        if res > step_clamp:
            err = err * (step_clamp / res)
        J = jacobian(q, arm)
        q = q + J.T @ np.linalg.solve(J @ J.T + damp, err)
    res = np.linalg.norm(forward_kinematics(q, arm) - target)
    if res < tol:
        return q
    raise IkError(
        f"IK did not converge: residual {best_res:.3e} after {max_iters} iterations",
        q=best_q,
        residual=best_res,
    )


def step_dynamics(s, torque, arm):
    """Semi-implicit Euler on decoupled double integrators with viscous
    damping: qdot' = qdot + dt (tau - c qdot)/I; q' = q + dt qdot'."""
    torque = np.asarray(torque, dtype=np.float64)
    if torque.shape != (arm.n,):
        raise CoreError("torque dimension mismatch")
    if not np.all(np.isfinite(torque)):
        raise CoreError("non-finite torque")
    qdot = s.qdot + arm.dt * (torque - arm.damping * s.qdot) / arm.inertia
    q = s.q + arm.dt * qdot
    return ArmState(q=q, qdot=qdot)


def inverse_dynamics(qdot, qdot_next, arm):
    """Exact inverse of step_dynamics' velocity update."""
    return arm.inertia * (qdot_next - qdot) / arm.dt + arm.damping * qdot


# ---------------------------------------------------------------------------
# demo generation

def _resample_joint_path(path, length):
    """Arc-length-uniform resampling of a joint-space path to `length` points.
    Endpoints are preserved exactly."""
    path = np.asarray(path)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total == 0:
        return np.repeat(path[:1], length, axis=0)
    targets = np.linspace(0.0, total, length)
    out = np.zeros((length, path.shape[1]))
    j = 0
    for i, st in enumerate(targets):
        while j < len(seg) - 1 and s[j + 1] < st:
            j += 1
        denom = seg[j] if seg[j] > 0 else 1.0
        frac = (st - s[j]) / denom
        frac = min(max(frac, 0.0), 1.0)
        out[i] = path[j] + frac * (path[j + 1] - path[j])
    out[0], out[-1] = path[0], path[-1]
    return out


def _track_cartesian(points, q_start, arm, tol=1e-5):
    """IK-track a sequence of Cartesian waypoints; returns the joint path."""
    qs = [np.asarray(q_start, dtype=np.float64)]
    for p in points:
        qs.append(ik_solve(p, qs[-1], arm, tol=tol))
    return np.asarray(qs)


HOME_BEND = 1.2  # rad, total elbow bend of the home pose


def home_pose(arm):
    """Slightly bent reference configuration; starts are sampled around it
    so demos stay in one arm-configuration branch."""
    return np.full(arm.n, HOME_BEND / arm.n)


def sample_start(rng, arm, spread=0.4):
    return home_pose(arm) + rng.uniform(-spread, spread, arm.n)


def _sample_goal(rng, arm, margin=0.85, min_frac=0.25):
    r = rng.uniform(min_frac * arm.reach, margin * arm.reach)
    theta = rng.uniform(-np.pi, np.pi)
    return np.array([r * np.cos(theta), r * np.sin(theta)])


REACH_DIST = (0.2, 1.3)  # m, start-to-goal distance band for reaching


def sample_reach_pair(rng, arm, dist_band=REACH_DIST, max_tries=200):
    """A (q0, goal) pair whose start-to-goal distance lies in dist_band, so
    every reach shares the same cruise/decelerate/hold structure."""
    for _ in range(max_tries):
        q0 = sample_start(rng, arm)
        goal = _sample_goal(rng, arm)
        d = np.linalg.norm(goal - forward_kinematics(q0, arm))
        if dist_band[0] <= d <= dist_band[1]:
            return q0, goal
    raise IkError("no start/goal pair inside the distance band")


REACH_GAIN = 0.25     # fraction of the remaining error covered per step
REACH_MAX_STEP = 0.12  # m, Cartesian step cap so IK tracking stays well-posed
REACH_MIN_STEP = 0.008  # m, floor on the approach speed
SEGMENT_DIST = (0.08, 0.6)  # m, reach distance of follow-up segments


def _servo_points(start_ee, goal, gain=REACH_GAIN, max_step=REACH_MAX_STEP,
                  min_step=REACH_MIN_STEP, max_steps=200):
    """Cartesian waypoints of a proportional servo: each step covers a fixed
    fraction of the remaining error (clamped to [min_step, max_step], never
    past the goal), so the path is a straight line traversed with
    exponentially decaying speed that lands exactly on the goal.

    The step is a pure function of the positional error, identical across
    demos.  The error then fully determines the displacement at every frame,
    so a cloned transition model cannot explain the data by velocity
    persistence alone (under persistence the speed would never ramp up from
    rest).  The speed floor keeps "approaching" and "holding" cleanly
    separated: there is no crawl regime for a mixture model to blur into the
    zero-displacement hold mode."""
    pos = start_ee.copy()
    points = []
    for _ in range(max_steps):
        err = goal - pos
        dist = np.linalg.norm(err)
        if dist < 1e-12:
            break
        step = min(max(gain * dist, min_step), max_step, dist)
        pos = pos + err / dist * step
        points.append(pos.copy())
    else:
        raise IkError("reach profile did not settle")
    points[-1] = goal.copy()
    return points


def _segment_cost(dist, gain=REACH_GAIN, max_step=REACH_MAX_STEP,
                  min_step=REACH_MIN_STEP):
    """Number of servo steps needed to close a given distance."""
    n = 0
    while dist > 1e-12:
        dist -= min(max(gain * dist, min_step), max_step, dist)
        n += 1
    return n


def _goal_near(rng, arm, ref, band, budget=None, max_tries=200):
    """A workspace goal whose distance from ref lies in band and whose servo
    cost fits the step budget; None if no draw qualifies."""
    for _ in range(max_tries):
        g = _sample_goal(rng, arm)
        d = np.linalg.norm(g - ref)
        if band[0] <= d <= band[1] and (budget is None
                                        or _segment_cost(d) <= budget):
            return g
    return None


def gen_reacher_demos(count, arm, rng, min_len=50, max_len=70):
    """IK-tracked proportional-servo reaches to a chain of random goals, with
    demo lengths drawn uniformly from [min_len, max_len].

    Each demo strings together as many reach segments as fit its length
    (a wide-range first reach, then shorter ones), separated by short holds
    at the reached goal.  The mid-demo goal switches matter twice over: they
    spread motion onsets and holds across all positions in the sequence, so
    the recurrent model cannot tie "stop moving" to elapsed time, and they
    demonstrate exactly the recovery an online goal change requires at
    rollout.

    States: dq (joint deltas), phi = EE - goal, psi = goal (per step, so a
    goal switch shows up in the state stream)."""
    from .stm import State, Trajectory

    demos = []
    for i in range(count):
        drng = rng.derive(i)
        for _attempt in range(50):
            try:
                length = min_len + int(drng.integers(max_len - min_len + 1))
                q0 = sample_start(drng, arm)
                pts, goals = [], []
                ref, final = forward_kinematics(q0, arm), None
                while True:
                    hold = 3 + int(drng.integers(6))
                    band = SEGMENT_DIST if final is not None else (0.2, 1.3)
                    g = _goal_near(drng, arm, ref, band,
                                   budget=length - 1 - len(pts) - hold)
                    if g is None:
                        break
                    seg = _servo_points(ref, g) + [g.copy()] * hold
                    pts += seg
                    goals += [g] * len(seg)
                    ref, final = g, g
                if final is None:
                    raise IkError("no reach segment fits the length budget")
                goals += [final] * (length - 1 - len(goals))
                pts += [final.copy()] * (length - 1 - len(pts))
                qpath = _track_cartesian(np.array(pts), q0, arm)
                break
            except IkError:
                continue
        else:
            raise IkError(f"could not generate reacher demo {i}")
        states = []
        prev_q = qpath[0]
        for q, g in zip(qpath, [goals[0]] + goals):
            ee = forward_kinematics(q, arm)
            states.append(State(dq=q - prev_q, phi=ee - g, psi=g.copy()))
            prev_q = q
        task = TaskSpec(kind="reacher", goal=final)
        demos.append(Trajectory(states=states, task=task, q0=qpath[0].copy()))
    return demos


def gen_circle_demos(radii, arm, rng, center=(0.5, 0.2), steps=80, q_seed=None):
    """One full IK-tracked circle per radius around a fixed center.

    States: dq, phi = absolute EE position, psi = (radius,)."""
    from .stm import State, Trajectory

    center = np.asarray(center, dtype=np.float64)
    demos = []
    for i, r in enumerate(radii):
        if r <= 0:
            raise CoreError(f"circle radius must be positive, got {r}")
        if np.linalg.norm(center) + r >= arm.reach:
            raise CoreError(f"circle r={r} at {center} exits the workspace")
        drng = rng.derive(i)
        q_init = q_seed if q_seed is not None else np.array([0.6, 0.6, 0.6])[: arm.n]
        if arm.n > 3:
            q_init = np.full(arm.n, 0.6)
        thetas = np.linspace(0.0, 2 * np.pi, steps + 1)
        points = center[None, :] + r * np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
        q0 = ik_solve(points[0], q_init, arm, tol=1e-6, max_iters=500)
        qpath = _track_cartesian(points[1:], q0, arm, tol=1e-6)
        states = []
        prev_q = qpath[0]
        for q in qpath:
            ee = forward_kinematics(q, arm)
            states.append(State(dq=q - prev_q, phi=ee.copy(), psi=np.array([r])))
            prev_q = q
        task = TaskSpec(kind="circle", radius=float(r), center=center.copy())
        demos.append(Trajectory(states=states, task=task, q0=qpath[0].copy()))
    return demos


def gen_pickplace_demos(count, arm, rng, min_len=166, max_len=170,
                        pick=(0.55, -0.25), approach_height=0.12):
    """Fixed pick location, random place goal.  Expert path: approach the
    pick point, close the gripper, transfer to the goal, open.  The grip
    channel is 0 before the grasp, 1 during transfer, 0 after release.

    States: dq, phi = EE - current goal, psi = goal, grip scalar."""
    from .stm import State, Trajectory

    pick = np.asarray(pick, dtype=np.float64)
    demos = []
    for i in range(count):
        drng = rng.derive(i)
        for _attempt in range(50):
            try:
                q0 = sample_start(drng, arm)
                goal = _sample_goal(drng, arm)
                if np.linalg.norm(goal - pick) < 0.15:
                    continue
                above_pick = pick + np.array([0.0, approach_height])
                start_ee = forward_kinematics(q0, arm)
                legs = [
                    np.linspace(start_ee, above_pick, 21)[1:],
                    np.linspace(above_pick, pick, 11)[1:],
                    np.linspace(pick, goal, 31)[1:],
                ]
                qpath_legs = []
                q = q0
                for leg in legs:
                    qs = _track_cartesian(leg, q, arm)
                    qpath_legs.append(qs[1:])
                    q = qs[-1]
                break
            except IkError:
                continue
        else:
            raise IkError(f"could not generate pick-place demo {i}")
        length = min_len + drng.integers(max_len - min_len + 1)
        # split the step budget pre/post grasp proportionally to path length
        pre = np.vstack([q0[None, :], qpath_legs[0], qpath_legs[1]])
        post = np.vstack([qpath_legs[1][-1:], qpath_legs[2]])
        pre_len = max(2, int(round(length * 0.4)))
        post_len = length - pre_len + 1
        pre_r = _resample_joint_path(pre, pre_len)
        post_r = _resample_joint_path(post, post_len)
        qpath = np.vstack([pre_r, post_r[1:]])
        grip = np.concatenate([np.zeros(pre_len), np.ones(post_len - 1)])
        grip[-1] = 0.0  # release at the goal
        states = []
        prev_q = qpath[0]
        for q, g in zip(qpath, grip):
            ee = forward_kinematics(q, arm)
            states.append(
                State(dq=q - prev_q, phi=ee - goal, psi=goal.copy(), grip=float(g))
            )
            prev_q = q
        task = TaskSpec(kind="pick_place", goal=goal, waypoints=[pick.copy()])
        demos.append(Trajectory(states=states, task=task, q0=qpath[0].copy()))
    return demos


# ---------------------------------------------------------------------------
# evaluation

def success_check(traj, task, arm):
    """Reacher / pick-place: final EE strictly within 0.05 m of the goal.
    Circle: radius error <= 10% of r at every step."""
    qs = traj.joint_angles()
    if task.kind == "circle":
        r, center = task.radius, task.center
        for q in qs:
            ee = forward_kinematics(q, arm)
            if abs(np.linalg.norm(ee - center) - r) > 0.1 * r:
                return False
        return True
    ee = forward_kinematics(qs[-1], arm)
    return bool(np.linalg.norm(ee - task.goal) < 0.05)

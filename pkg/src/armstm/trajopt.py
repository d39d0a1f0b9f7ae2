"""Gradient-descent trajectory smoother.

The cost trades closeness to the generated skeleton against smoothness of
consecutive joint positions, with an optional quadratic goal-attraction
term on the final end-effector position:

    V = sum_{t=1..T} ||q_t - ref_t||^2
      + gamma * sum_{t=0..T-1} ||q_{t+1} - q_t||^2
      + beta * ||FK(q_T) - target||^2            (optional)

q_0 is never pulled toward the reference; with fixed endpoints the
gradients at q_0 and q_T are zeroed so both stay exactly in place.
"""

from dataclasses import dataclass

import numpy as np

from . import arm as arm_world
from .core import CoreError


class TrajOptError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


@dataclass
class SmoothConfig:
    gamma: float = 0.5
    eta: float = 0.05
    iterations: int = 200
    fixed_endpoints: bool = True
    reanchor: bool = False        # re-anchor the reference to the current
                                  # trajectory before every iteration
    beta: float = 0.0             # goal-attraction weight
    goal: np.ndarray | None = None
    arm: arm_world.ArmConfig | None = None

    def __post_init__(self):
        if self.gamma < 0 or self.eta <= 0:
            raise CoreError("need gamma >= 0 and eta > 0")


def cost_V(traj, skeleton, cfg):
    traj = np.asarray(traj, dtype=np.float64)
    skeleton = np.asarray(skeleton, dtype=np.float64)
    if traj.shape != skeleton.shape:
        raise CoreError(f"trajectory/skeleton shape mismatch: {traj.shape} vs {skeleton.shape}")
    close = float(np.sum((traj[1:] - skeleton[1:]) ** 2))
    smooth = float(np.sum(np.diff(traj, axis=0) ** 2))
    v = close + cfg.gamma * smooth
    if cfg.beta > 0:
        ee = arm_world.forward_kinematics(traj[-1], cfg.arm)
        v += cfg.beta * float(np.sum((ee - cfg.goal) ** 2))
    return v


def cost_grad(traj, skeleton, cfg):
    traj = np.asarray(traj, dtype=np.float64)
    skeleton = np.asarray(skeleton, dtype=np.float64)
    if traj.shape != skeleton.shape:
        raise CoreError("trajectory/skeleton shape mismatch")
    g = np.zeros_like(traj)
    g[1:] = 2.0 * (traj[1:] - skeleton[1:])
    d = np.diff(traj, axis=0)
    g[:-1] -= 2.0 * cfg.gamma * d
    g[1:] += 2.0 * cfg.gamma * d
    if cfg.beta > 0:
        ee = arm_world.forward_kinematics(traj[-1], cfg.arm)
        J = arm_world.jacobian(traj[-1], cfg.arm)
        g[-1] += 2.0 * cfg.beta * (J.T @ (ee - cfg.goal))
    return g


def smooth(skeleton, cfg):
    """Plain gradient descent from traj := skeleton.

    Returns (trajectory, cost history with the initial cost first).
    Aborts with the partial history if the cost diverges."""
    skeleton = np.asarray(skeleton, dtype=np.float64)
    if skeleton.shape[0] < 3:
        raise CoreError("skeleton needs at least 3 points")
    traj = skeleton.copy()
    ref = skeleton
    history = [cost_V(traj, ref, cfg)]
    limit = max(1.0, history[0]) * 1e6
    for _ in range(cfg.iterations):
        if cfg.reanchor:
            ref = traj.copy()
        g = cost_grad(traj, ref, cfg)
        if cfg.fixed_endpoints:
            g[0] = 0.0
            g[-1] = 0.0
        traj = traj - cfg.eta * g
        c = cost_V(traj, ref, cfg)
        history.append(c)
        if not np.isfinite(c) or c > limit:
            raise TrajOptError(
                f"smoothing diverged (cost {c:.3e}); reduce eta", history=history
            )
    return traj, history

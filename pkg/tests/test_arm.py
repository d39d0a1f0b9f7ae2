import numpy as np
import pytest

from armstm.arm import (
    ArmConfig, ArmState, IkError, TaskSpec, forward_kinematics,
    gen_circle_demos, gen_pickplace_demos, gen_reacher_demos, ik_solve,
    inverse_dynamics, jacobian, step_dynamics, success_check,
)
from armstm.core import CoreError, Rng
from armstm.stm import Trajectory

ARM = ArmConfig()  # links (0.5, 0.3, 0.2)


def test_fk_straight_arm():
    assert np.allclose(forward_kinematics(np.zeros(3), ARM), [1.0, 0.0])


def test_fk_rotated_straight_arm():
    ee = forward_kinematics(np.array([np.pi / 2, 0, 0]), ARM)
    assert np.allclose(ee, [0.0, 1.0], atol=1e-15)


def test_fk_complex_accumulation_oracle():
    rng = Rng(1)
    for _ in range(20):
        q = rng.uniform(-np.pi, np.pi, 3)
        z = 0.0 + 0.0j
        angle = 0.0
        for L, qi in zip(ARM.link_lengths, q):
            angle += qi
            z += L * np.exp(1j * angle)
        ee = forward_kinematics(q, ARM)
        assert abs(ee[0] - z.real) < 1e-12
        assert abs(ee[1] - z.imag) < 1e-12


def test_fk_periodic():
    rng = Rng(2)
    q = rng.uniform(-1, 1, 3)
    for j in range(3):
        shifted = q.copy()
        shifted[j] += 2 * np.pi
        assert np.allclose(forward_kinematics(q, ARM),
                           forward_kinematics(shifted, ARM), atol=1e-12)


def test_fk_reach_bound():
    rng = Rng(3)
    for _ in range(50):
        q = rng.uniform(-np.pi, np.pi, 3)
        assert np.linalg.norm(forward_kinematics(q, ARM)) <= ARM.reach + 1e-12


def test_jacobian_single_link_closed_form():
    one = ArmConfig(link_lengths=(0.7,))
    J = jacobian(np.zeros(1), one)
    assert np.allclose(J[:, 0], [0.0, 0.7])


def test_jacobian_finite_differences():
    rng = Rng(4)
    eps = 1e-7
    for _ in range(10):
        q = rng.uniform(-np.pi, np.pi, 3)
        J = jacobian(q, ARM)
        for j in range(3):
            qp, qm = q.copy(), q.copy()
            qp[j] += eps
            qm[j] -= eps
            num = (forward_kinematics(qp, ARM) - forward_kinematics(qm, ARM)) / (2 * eps)
            assert np.max(np.abs(J[:, j] - num)) < 1e-7


def test_jacobian_singular_at_straight_arm():
    J = jacobian(np.zeros(3), ARM)
    assert np.linalg.matrix_rank(J, tol=1e-12) == 1


def test_ik_fixed_point():
    q = np.array([0.3, 0.4, -0.2])
    target = forward_kinematics(q, ARM)
    out = ik_solve(target, q, ARM)
    assert np.array_equal(out, q)


def test_ik_convergence_harness():
    failures = 0
    rng = Rng(5)
    for i in range(1000):
        r = rng.derive(i)
        q0 = r.uniform(-np.pi / 2, np.pi / 2, 3)
        radius = r.uniform(0.2, 0.9 * ARM.reach)
        theta = r.uniform(-np.pi, np.pi)
        target = radius * np.array([np.cos(theta), np.sin(theta)])
        try:
            q = ik_solve(target, q0, ARM, tol=1e-4, max_iters=200)
            assert np.linalg.norm(forward_kinematics(q, ARM) - target) < 1e-4
        except IkError:
            failures += 1
    assert failures < 10  # < 1%


def test_ik_unreachable_target():
    with pytest.raises(IkError) as exc:
        ik_solve(np.array([2.0, 0.0]), np.zeros(3), ARM)
    assert exc.value.q is not None
    assert exc.value.residual > 0.9


def test_reacher_demos():
    rng = Rng(6)
    demos = gen_reacher_demos(10, ARM, rng)
    for d in demos:
        assert 50 <= len(d) <= 70
        qs = d.joint_angles()
        assert np.linalg.norm(forward_kinematics(qs[-1], ARM) - d.task.goal) < 1e-3
        total = sum(s.dq for s in d.states)
        assert np.max(np.abs(total - (qs[-1] - d.q0))) < 1e-12
        # phi is EE relative to the step's own goal (psi) at every step,
        # and the last step's goal is the task goal
        for q, s in zip(qs, d.states):
            assert np.allclose(s.phi, forward_kinematics(q, ARM) - s.psi,
                               atol=1e-12)
        assert np.array_equal(d.states[-1].psi, d.task.goal)
    # the corpus mixes single-goal demos with mid-demo goal switches
    assert any(not np.array_equal(d.states[0].psi, d.states[-1].psi)
               for d in demos)


def test_reacher_demos_deterministic():
    a = gen_reacher_demos(3, ARM, Rng(7))
    b = gen_reacher_demos(3, ARM, Rng(7))
    for x, y in zip(a, b):
        assert np.array_equal(x.joint_angles(), y.joint_angles())


def test_circle_demos():
    radii = np.linspace(0.05, 0.20, 10)
    demos = gen_circle_demos(radii, ARM, Rng(8))
    assert len(demos) == 10
    center = demos[0].task.center
    for d, r in zip(demos, radii):
        qs = d.joint_angles()
        for q in qs:
            ee = forward_kinematics(q, ARM)
            assert abs(np.linalg.norm(ee - center) - r) < 1e-3


def test_circle_rejects_degenerate_radius():
    with pytest.raises(CoreError):
        gen_circle_demos([0.0], ARM, Rng(0))


def test_circle_rejects_workspace_exit():
    with pytest.raises(CoreError):
        gen_circle_demos([0.9], ARM, Rng(0))


def test_pickplace_demos():
    demos = gen_pickplace_demos(5, ARM, Rng(9))
    for d in demos:
        assert 166 <= len(d) <= 170
        grips = np.array([s.grip for s in d.states])
        transitions = np.sum(np.abs(np.diff(grips)) > 0)
        assert transitions == 2
        assert grips[0] == 0.0 and grips[-1] == 0.0 and grips.max() == 1.0
        qs = d.joint_angles()
        assert np.linalg.norm(forward_kinematics(qs[-1], ARM) - d.task.goal) < 1e-3


def test_step_dynamics_equilibrium():
    s = ArmState(q=np.array([0.1, 0.2, 0.3]), qdot=np.zeros(3))
    out = step_dynamics(s, np.zeros(3), ARM)
    assert np.array_equal(out.q, s.q)
    assert np.array_equal(out.qdot, s.qdot)


def test_step_dynamics_unit_step():
    arm = ArmConfig(link_lengths=(1.0,), inertia=1.0, damping=0.0, dt=0.01)
    s = ArmState(q=np.zeros(1), qdot=np.zeros(1))
    out = step_dynamics(s, np.array([1.0]), arm)
    assert out.qdot[0] == pytest.approx(0.01)
    assert out.q[0] == pytest.approx(1e-4)


def test_step_dynamics_energy_dissipation():
    rng = Rng(10)
    for _ in range(20):
        s = ArmState(q=rng.uniform(-1, 1, 3), qdot=rng.uniform(-2, 2, 3))
        for _ in range(5):
            nxt = step_dynamics(s, np.zeros(3), ARM)
            if np.any(s.qdot != 0):
                assert np.sum(nxt.qdot**2) < np.sum(s.qdot**2)
            s = nxt


def test_inverse_dynamics_roundtrip():
    rng = Rng(11)
    s = ArmState(q=rng.uniform(-1, 1, 3), qdot=rng.uniform(-2, 2, 3))
    tau = rng.uniform(-2, 2, 3)
    nxt = step_dynamics(s, tau, ARM)
    recovered = inverse_dynamics(s.qdot, nxt.qdot, ARM)
    assert np.max(np.abs(recovered - tau)) < 1e-10


def test_success_check_on_expert_demo():
    demos = gen_reacher_demos(3, ARM, Rng(12))
    for d in demos:
        assert success_check(d, d.task, ARM)


def test_success_check_stationary_fails():
    from armstm.stm import State
    goal = np.array([0.8, 0.0])
    q0 = np.array([1.5, 0.5, 0.5])
    states = [State(dq=np.zeros(3), phi=np.zeros(2), psi=goal) for _ in range(5)]
    traj = Trajectory(states=states, task=TaskSpec(kind="reacher", goal=goal), q0=q0)
    assert not success_check(traj, traj.task, ARM)


def test_success_threshold_is_strict():
    from armstm.stm import State
    q0 = np.zeros(3)
    ee = forward_kinematics(q0, ARM)
    goal = ee + np.array([0.0501, 0.0])
    states = [State(dq=np.zeros(3), phi=ee - goal, psi=goal) for _ in range(2)]
    traj = Trajectory(states=states, task=TaskSpec(kind="reacher", goal=goal), q0=q0)
    assert not success_check(traj, traj.task, ARM)
    goal2 = ee + np.array([0.0499, 0.0])
    traj2 = Trajectory(states=states, task=TaskSpec(kind="reacher", goal=goal2), q0=q0)
    assert success_check(traj2, traj2.task, ARM)

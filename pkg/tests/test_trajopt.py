import numpy as np
import pytest

from armstm.arm import ArmConfig, forward_kinematics
from armstm.core import CoreError, Rng
from armstm.trajopt import SmoothConfig, TrajOptError, cost_V, cost_grad, smooth


def random_skeleton(rng, T=20, n=3, scale=0.5):
    return np.cumsum(rng.uniform(-scale / T, scale / T, (T, n)), axis=0)


def test_cost_zero_residual():
    rng = Rng(0)
    sk = random_skeleton(rng)
    assert cost_V(sk, sk, SmoothConfig(gamma=0.0)) == 0.0


def test_cost_hand_evaluated_example():
    # scalar joints, points (0, 1, 2), gamma = 1: closeness 0, two unit steps
    sk = np.array([[0.0], [1.0], [2.0]])
    assert cost_V(sk, sk, SmoothConfig(gamma=1.0)) == pytest.approx(2.0)


def test_cost_quadratic_homogeneity():
    rng = Rng(1)
    sk = random_skeleton(rng)
    dev = rng.uniform(-0.1, 0.1, sk.shape)
    dev[0] = 0.0
    cfg = SmoothConfig(gamma=0.0)
    c1 = cost_V(sk + dev, sk, cfg)
    c2 = cost_V(sk + 2 * dev, sk, cfg)
    assert c2 == pytest.approx(4 * c1, rel=1e-12)


def test_cost_shape_mismatch():
    with pytest.raises(CoreError):
        cost_V(np.zeros((4, 2)), np.zeros((5, 2)), SmoothConfig())


def test_grad_linear_trajectory_smoothness_free():
    # uniformly spaced points form a discrete harmonic: interior smoothness
    # gradient vanishes
    sk = np.linspace(0, 1, 10)[:, None] * np.array([1.0, -2.0, 0.5])
    g = cost_grad(sk, sk, SmoothConfig(gamma=3.0))
    assert np.max(np.abs(g[1:-1])) < 1e-12


def test_grad_gamma_zero_closed_form():
    rng = Rng(2)
    sk = random_skeleton(rng)
    traj = sk + rng.uniform(-0.1, 0.1, sk.shape)
    g = cost_grad(traj, sk, SmoothConfig(gamma=0.0))
    expected = 2 * (traj - sk)
    expected[0] = 0.0
    assert np.max(np.abs(g - expected)) < 1e-12


def test_grad_finite_differences():
    rng = Rng(3)
    sk = random_skeleton(rng, T=8, n=2)
    traj = sk + rng.uniform(-0.1, 0.1, sk.shape)
    arm = ArmConfig(link_lengths=(0.4, 0.3))
    for cfg in (SmoothConfig(gamma=0.7),
                SmoothConfig(gamma=0.7, beta=2.0,
                             goal=np.array([0.3, 0.2]), arm=arm)):
        g = cost_grad(traj, sk, cfg)
        eps = 1e-6
        worst = 0.0
        for t in range(traj.shape[0]):
            for j in range(traj.shape[1]):
                orig = traj[t, j]
                traj[t, j] = orig + eps
                up = cost_V(traj, sk, cfg)
                traj[t, j] = orig - eps
                dn = cost_V(traj, sk, cfg)
                traj[t, j] = orig
                num = (up - dn) / (2 * eps)
                worst = max(worst, abs(g[t, j] - num) / max(abs(num), 1e-4))
        assert worst < 1e-6


def test_smooth_gamma_zero_fixed_point():
    rng = Rng(4)
    sk = random_skeleton(rng)
    out, hist = smooth(sk, SmoothConfig(gamma=0.0, iterations=50))
    assert np.max(np.abs(out - sk)) < 1e-12
    assert hist[0] == 0.0


def test_smooth_monotone_cost():
    rng = Rng(5)
    for seed in range(5):
        sk = random_skeleton(Rng(seed), T=30)
        _, hist = smooth(sk, SmoothConfig(gamma=0.5, eta=0.05, iterations=200))
        diffs = np.diff(hist)
        assert np.all(diffs <= 1e-12)


def test_smooth_preserves_fixed_endpoints():
    rng = Rng(6)
    sk = random_skeleton(rng)
    out, _ = smooth(sk, SmoothConfig(gamma=2.0, eta=0.02, iterations=100))
    assert np.array_equal(out[0], sk[0])
    assert np.array_equal(out[-1], sk[-1])


def test_smooth_reduces_step_energy():
    rng = Rng(7)
    sk = random_skeleton(rng, T=40)
    sk += Rng(8).uniform(-0.02, 0.02, sk.shape)  # jitter to give slack
    out, _ = smooth(sk, SmoothConfig(gamma=1.0, eta=0.02, iterations=300))
    before = np.sum(np.diff(sk, axis=0) ** 2)
    after = np.sum(np.diff(out, axis=0) ** 2)
    assert after <= before


def test_smooth_large_gamma_approaches_chord():
    rng = Rng(9)
    sk = random_skeleton(rng, T=25)
    chord = sk[0] + np.linspace(0, 1, 25)[:, None] * (sk[-1] - sk[0])
    devs = []
    for gamma in (1.0, 10.0, 100.0):
        eta = min(0.05, 0.4 / (1 + 4 * gamma))  # stay under the stability bound
        out, _ = smooth(sk, SmoothConfig(gamma=gamma, eta=eta, iterations=4000))
        devs.append(np.max(np.abs(out - chord)))
    assert devs[0] > devs[1] > devs[2]


def test_smooth_commutes_with_offsets():
    rng = Rng(10)
    sk = random_skeleton(rng)
    delta = np.array([0.5, -1.0, 2.0])
    cfg = SmoothConfig(gamma=0.8, eta=0.03, iterations=150)
    a, _ = smooth(sk + delta, cfg)
    b, _ = smooth(sk, cfg)
    assert np.max(np.abs(a - (b + delta))) < 1e-9


def test_smooth_reanchor_flag_runs():
    rng = Rng(11)
    sk = random_skeleton(rng)
    out, hist = smooth(sk, SmoothConfig(gamma=0.5, eta=0.02, iterations=50,
                                        reanchor=True))
    assert np.all(np.isfinite(out))
    assert len(hist) == 51


def test_smooth_diverges_with_huge_step():
    rng = Rng(12)
    sk = random_skeleton(rng)
    with pytest.raises(TrajOptError) as exc:
        smooth(sk, SmoothConfig(gamma=5.0, eta=5.0, iterations=500))
    assert len(exc.value.history) > 1


def test_smooth_requires_three_points():
    with pytest.raises(CoreError):
        smooth(np.zeros((2, 3)), SmoothConfig())

import numpy as np
import pytest

from mbcritic import toyoracle as toy
from mbcritic.dynamics import ScalarIntegrator, TaskSpec


def test_optimal_policy():
    assert toy.optimal_policy(-6.0, 0.0) == 3.0
    assert toy.optimal_policy(0.0, 0.0) == 0.0
    for g in (-2.5, 0.1, 7.0):
        assert toy.optimal_policy(g, g) == 0.0


def test_meta_optimal_phi_examples():
    assert toy.meta_optimal_phi(-6.0, -6.0, 0.0, 0.0) == 0.25
    # the optimal policy needs no correction
    s0, g = -6.0, 0.0
    th = toy.optimal_policy(s0, g)
    assert toy.meta_optimal_phi(s0, s0 + th, th, g) == 0.0
    with pytest.raises(toy.DegenerateInstance):
        toy.meta_optimal_phi(1.0, -1.0, 0.0, 0.0)


def test_meta_optimal_phi_vs_root_finder():
    rng = np.random.default_rng(0)
    n = 0
    while n < 50:
        s0, th, g = rng.uniform(-3, 3, 3)
        s1 = s0 + th
        if abs(s0 + s1 + 2 * th) < 0.2:
            continue
        n += 1
        assert toy.meta_phi_by_root(s0, s1, th, g) == pytest.approx(toy.meta_optimal_phi(s0, s1, th, g), abs=1e-10)


def test_meta_optimal_phi_zeroes_task_loss():
    rng = np.random.default_rng(1)
    for _ in range(20):
        s0, th, g = rng.uniform(-3, 3, 3)
        s1 = s0 + th
        phi = toy.meta_optimal_phi(s0, s1, th, g)
        assert toy.toy_task_loss(phi, s0, s1, th, g) == pytest.approx(0.0, abs=1e-18 + 1e-12 * abs(g))


def test_supq_optimal_phi_examples():
    assert toy.supq_optimal_phi(-6.0, -2.0, 4.0, 0.0) == 0.0
    # direct evaluation of the closed form at r2 = 36
    assert toy.supq_optimal_phi(-6.0, -2.0, 4.0, 36.0) == 9.0
    with pytest.raises(toy.DegenerateInstance):
        toy.supq_optimal_phi(-1.0, -1.0, 1.0, 3.0)


def test_supq_optimal_phi_vs_scan():
    rng = np.random.default_rng(2)
    checked = 0
    while checked < 10:
        s0, a = rng.uniform(-3, 3, 2)
        s1 = s0 + a
        r2 = (s1 + a - rng.uniform(-2, 2)) ** 2
        phi = toy.supq_optimal_phi(s0, s1, a, r2)
        if abs(phi) > 19:
            continue
        checked += 1
        assert toy.supq_phi_by_scan(s0, s1, a, r2) == pytest.approx(phi, abs=1e-4)


def test_supq_fixed_point():
    assert toy.supq_policy_fixed_point(-6.0, -2.0) == 4.0
    assert toy.supq_policy_fixed_point(0.0, 0.0) == 0.0


def test_fixed_point_separation():
    rng = np.random.default_rng(3)
    for _ in range(100):
        s0, s1, g = rng.uniform(-5, 5, 3)
        equal = toy.supq_policy_fixed_point(s0, s1) == pytest.approx(toy.optimal_policy(s0, g), abs=1e-12)
        assert equal == (abs(g + s1) < 1e-12)
        # equality exactly on the g = -s1 line
        assert toy.supq_policy_fixed_point(s0, s1) == pytest.approx(toy.optimal_policy(s0, -s1), abs=1e-12)


def test_metacritic_scalar_fixed_point():
    assert toy.metacritic_scalar_fixed_point(0.0, 0.0, 1.0) == 0.0
    assert toy.metacritic_scalar_fixed_point(-6.0, -2.0, 4.0) == 0.5
    assert toy.metacritic_scalar_fixed_point(-6.0, -2.0, 4.0) != toy.optimal_policy(-6.0, 0.0)
    with pytest.raises(toy.DegenerateInstance):
        toy.metacritic_scalar_fixed_point(-1.0, -1.0, 1.0)


def test_true_q_return():
    assert toy.toy_return(3.0, -6.0, 0.0) == 0.0
    assert toy.toy_return(0.0, -6.0, 0.0) == 36.0
    rng = np.random.default_rng(4)
    for th, s0, g in rng.uniform(-4, 4, (20, 3)):
        assert toy.toy_return(th, s0, g) == pytest.approx(toy.toy_return_by_steps(th, s0, g), rel=1e-14)
    pol = lambda s: np.full_like(s, 1.0)  # noqa: E731
    assert toy.true_q_return(pol, ScalarIntegrator(), -1.0, TaskSpec([1.0], 2)) == 0.0


def test_return_minimised_at_optimal_policy():
    for s0, g in ((-6.0, 0.0), (1.3, -0.7), (0.0, 2.0)):
        best = toy.grid_argmin(lambda th: toy.toy_return(th, s0, g), -10, 10, 1e-3)
        assert best == pytest.approx(toy.optimal_policy(s0, g), abs=1e-3)


def test_toy_instance():
    inst = toy.ToyInstance(-6.0, 0.0, theta=3.0)
    assert inst.s1 == -3.0
    with pytest.raises(ValueError):
        toy.ToyInstance(0.0, 0.0, horizon=3)

import csv

import numpy as np
import pytest

from mbcritic.dynamics import PointMass2D
from mbcritic.landscape import (GridSpec, InvalidCell, argmin_cell, cell_distance, constant_action_optimum,
                                landscape_grid)
from mbcritic.nets import QuadraticFormCritic


def test_true_return_argmin_contains_optimum():
    for goal in ((1.0, 0.5), (-1.0, 1.0), (0.0, 0.0), (0.3, -1.7)):
        spec = GridSpec(goal=goal)
        ls = landscape_grid("true-return", spec)
        star = constant_action_optimum(spec)
        x, y = spec.axes()
        h = x[1] - x[0]
        got = ls.argmin_theta()
        assert np.all(np.abs(got - star) <= h / 2 + 1e-12)
        assert ls.valid.all()


def test_zero_critic_is_flat():
    q = QuadraticFormCritic(4, rank=3, goal_mode="relative")
    ls = landscape_grid("meta", GridSpec(resolution=9), np.zeros(q.n_params), critic=q)
    assert np.all(ls.value == 0.0)
    assert np.all(ls.grad == 0.0)
    assert ls.argmin() == (0, 0)


def test_gradient_field_matches_value_differences():
    rng = np.random.default_rng(0)
    q = QuadraticFormCritic(4, rank=3, goal_mode="relative")
    spec = GridSpec(goal=(0.7, -0.4), s0=(0.2, 0.1))
    x, y = spec.axes()
    h = x[1] - x[0]
    for kind, params in (("true-return", None), ("meta", rng.standard_normal(q.n_params))):
        ls = landscape_grid(kind, spec, params, critic=q)
        fd1 = (ls.value[2:, 1:-1] - ls.value[:-2, 1:-1]) / (2 * h)
        fd2 = (ls.value[1:-1, 2:] - ls.value[1:-1, :-2]) / (2 * h)
        g = ls.grad[1:-1, 1:-1]
        scale = max(np.abs(g).max(), 1e-12)
        assert np.abs(g[..., 0] - fd1).max() <= 0.05 * scale
        assert np.abs(g[..., 1] - fd2).max() <= 0.05 * scale


def test_argmin_cell_basic_cases():
    assert argmin_cell([[5.0]]) == (0, 0)
    v = np.array([[1.0, 0.0, 1.0], [0.0, 2.0, 0.0]])
    assert argmin_cell(v) == (0, 1)  # ties: lowest i, then lowest j
    # symmetric bowl centred on the middle cell
    a = np.linspace(-1, 1, 5)
    bowl = a[:, None] ** 2 + a[None, :] ** 2
    assert argmin_cell(bowl) == (2, 2)


def test_argmin_cell_rejects_invalid():
    v = np.zeros((3, 3))
    v[1, 2] = np.nan
    with pytest.raises(InvalidCell, match=r"\(1, 2\)"):
        argmin_cell(v)
    with pytest.raises(InvalidCell):
        argmin_cell(np.zeros((2, 2)), valid=np.array([[True, False], [True, True]]))
    with pytest.raises(ValueError):
        argmin_cell(np.zeros(4))


def test_argmin_matches_independent_scan():
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = rng.integers(0, 5, (7, 6)).astype(float)
        best = None
        for i in range(7):
            for j in range(6):
                if best is None or v[i, j] < v[best]:
                    best = (i, j)
        assert argmin_cell(v) == best


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(resolution=1)
    with pytest.raises(ValueError):
        GridSpec(theta1=(1.0, 1.0))
    with pytest.raises(ValueError):
        GridSpec(horizon=0)
    spec = GridSpec(resolution=(3, 4))
    th = spec.thetas()
    assert th.shape == (12, 2)
    assert np.array_equal(th[0], [-2.0, -2.0]) and np.array_equal(th[1], [-2.0, -2.0 + 4 / 3])


def test_landscape_kind_and_model_checks():
    with pytest.raises(ValueError):
        landscape_grid("critic", GridSpec())
    with pytest.raises(ValueError):
        landscape_grid("meta", GridSpec())


def test_csv_columns(tmp_path):
    spec = GridSpec(resolution=3)
    p = landscape_grid("true-return", spec).to_csv(tmp_path / "l.csv")
    with open(p) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["theta1", "theta2", "value", "g1", "g2"]
    assert len(rows) == 1 + 9
    assert [float(x) for x in rows[1][:2]] == [-2.0, -2.0]


def test_cell_distance_and_optimum_scale():
    assert cell_distance((3, 4), (5, 3)) == 2
    spec = GridSpec(goal=(1.0, 0.5))
    np.testing.assert_allclose(constant_action_optimum(spec, PointMass2D(action_scale=0.5)), [2.0, 1.0])

"""Value and gradient-field grids over constant-action policy parameters.

Every grid cell is a constant-action policy ``a_t = [theta_1, theta_2]``.  The
cell value is the critic summed along that policy's own rollout (or the
on-policy return for ``"true-return"``); the gradient is the total derivative
of that value with respect to ``theta``, rollout included.  All cells are
evaluated as one batch through a single compiled graph.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dynamics import PointMass2D, TaskSpec, rollout, terminal_cost
from .metacritic import _batched_states

KINDS = ("meta", "supervised", "true-return")


class InvalidCell(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    theta1: tuple[float, float] = (-2.0, 2.0)
    theta2: tuple[float, float] = (-2.0, 2.0)
    resolution: tuple[int, int] = (41, 41)
    goal: tuple[float, ...] = (0.0, 0.0)
    s0: tuple[float, ...] = (0.0, 0.0)
    horizon: int = 10

    def __post_init__(self):
        res = self.resolution
        if isinstance(res, int):
            res = (res, res)
        object.__setattr__(self, "resolution", tuple(int(r) for r in res))
        for name in ("theta1", "theta2", "goal", "s0"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if min(self.resolution) < 2:
            raise ValueError("grid resolution must be >= 2 per axis")
        for lo, hi in (self.theta1, self.theta2):
            if not lo < hi:
                raise ValueError(f"empty range [{lo}, {hi}]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        n1, n2 = self.resolution
        return np.linspace(*self.theta1, n1), np.linspace(*self.theta2, n2)

    def thetas(self) -> np.ndarray:
        """All cells as an ``(n1 * n2, 2)`` array, ``theta_1`` varying slowest."""
        x, y = self.axes()
        X, Y = np.meshgrid(x, y, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=1)


@dataclass
class Landscape:
    kind: str
    spec: GridSpec
    value: np.ndarray  # (n1, n2)
    grad: np.ndarray  # (n1, n2, 2)

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.value) & np.isfinite(self.grad).all(axis=-1)

    def argmin(self) -> tuple[int, int]:
        return argmin_cell(self.value, self.valid)

    def argmin_theta(self) -> np.ndarray:
        i, j = self.argmin()
        x, y = self.spec.axes()
        return np.array([x[i], y[j]])

    def to_csv(self, path) -> Path:
        """Columns ``theta1, theta2, value, g1, g2`` (``g`` = gradient of the value)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        x, y = self.spec.axes()
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["theta1", "theta2", "value", "g1", "g2"])
            for i, a in enumerate(x):
                for j, b in enumerate(y):
                    w.writerow([repr(float(a)), repr(float(b)), repr(float(self.value[i, j])),
                                repr(float(self.grad[i, j, 0])), repr(float(self.grad[i, j, 1]))])
        return path


def argmin_cell(values, valid=None) -> tuple[int, int]:
    """Index of the smallest value; ties go to the lowest ``i``, then ``j``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ValueError("argmin_cell needs a nonempty 2-D grid")
    ok = np.isfinite(values) if valid is None else (np.asarray(valid) & np.isfinite(values))
    if not ok.all():
        bad = np.argwhere(~ok)[0]
        raise InvalidCell(f"invalid cell at {tuple(int(b) for b in bad)}")
    # np.argmin returns the first occurrence in row-major order
    k = int(np.argmin(values))
    return divmod(k, values.shape[1])


class _GridProgram:
    def __init__(self, kind, critic, model, n_cells: int, horizon: int, goal_dim: int):
        self.theta = dc.inp("theta", (n_cells, 2))
        self.s0 = dc.inp("s0", (n_cells, model.state_dim))
        self.goal = dc.inp("goal", (n_cells, goal_dim))
        tr = rollout(lambda s: dc.broadcast_to(self.theta, tuple(s.shape)), model, self.s0,
                     TaskSpec(np.zeros(goal_dim), horizon), differentiable=True)
        if kind == "true-return":
            per_cell = terminal_cost(tr.final_state, self.goal)
        else:
            self.phi = dc.inp("phi", (critic.n_params,))
            states = _batched_states(tr.states, horizon)
            acts = _batched_states(tr.actions, horizon)
            per_cell = dc.sum_(critic(self.phi, states, acts, self.goal), axis=-1)
        (g,) = dc.grad(dc.sum_(per_cell), [self.theta])
        self.program = dc.Program([per_cell, g], check_finite=False)

    def __call__(self, theta, s0, goal, phi=None):
        b = {"theta": theta, "s0": s0, "goal": goal}
        if phi is not None:
            b["phi"] = phi
        return self.program(b)


def landscape_grid(kind: str, spec: GridSpec, params=None, *, critic=None, model=None) -> Landscape:
    """Value and gradient grid for one critic kind.

    ``params`` are the critic parameters (unused for ``"true-return"``).
    Cells whose rollout or critic evaluation is non-finite are kept as NaN.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown landscape kind {kind!r}")
    model = model or PointMass2D()
    if model.action_dim != 2:
        raise ValueError("landscapes need a 2-D action space")
    if kind != "true-return" and (critic is None or params is None):
        raise ValueError(f"{kind} landscape needs a critic and its parameters")
    thetas = spec.thetas()
    n = len(thetas)
    goal = np.tile(np.asarray(spec.goal, dtype=np.float64), (n, 1))
    s0 = np.tile(np.asarray(spec.s0, dtype=np.float64), (n, 1))
    prog = _GridProgram(kind, critic, model, n, spec.horizon, goal.shape[1])
    with np.errstate(all="ignore"):
        value, g = prog(thetas, s0, goal, None if kind == "true-return" else np.asarray(params))
    n1, n2 = spec.resolution
    return Landscape(kind, spec, np.asarray(value).reshape(n1, n2), np.asarray(g).reshape(n1, n2, 2))


def constant_action_optimum(spec: GridSpec, model=None) -> np.ndarray:
    """``theta* = (g - s0) / (T * dt)``: the constant action that lands on the goal."""
    model = model or PointMass2D()
    scale = getattr(model, "action_scale", 1.0)
    return (np.asarray(spec.goal) - np.asarray(spec.s0)) / (spec.horizon * model.dt * scale)


def cell_distance(a: tuple[int, int], b: tuple[int, int]) -> int:
    """Chebyshev distance in cells."""
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))

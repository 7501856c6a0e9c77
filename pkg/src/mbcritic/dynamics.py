"""Differentiable transition models, tasks and rollouts.

All step functions are written once over :mod:`mbcritic.diffcore` dispatch, so
the same code runs on plain arrays (value-only rollouts) and on expression
graphs (differentiable rollouts) and produces bit-identical state values.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc


class RolloutError(FloatingPointError):
    def __init__(self, step: int, msg: str = "non-finite state"):
        super().__init__(f"{msg} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# steps


def scalar_step(s, a):
    return s + a


def point_mass_step(s, a, dt: float):
    return s + a * dt


@dataclass(frozen=True)
class ArmParams:
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 0.5
    l2: float = 0.5
    friction: float = 0.1
    torque_limit: float = 5.0
    gravity: float = 0.0

    def __post_init__(self):
        for name in ("m1", "m2", "l1", "l2", "torque_limit"):
            v = getattr(self, name)
            if not isinstance(v, dc.Expr) and not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")

    def scaled(self, mass: float = 1.0, lengths: tuple[float, float] | None = None) -> "ArmParams":
        l1, l2 = (self.l1, self.l2) if lengths is None else lengths
        return ArmParams(self.m1 * mass, self.m2 * mass, l1, l2,
                         self.friction, self.torque_limit, self.gravity)


def arm_mass_matrix(q2, p: ArmParams):
    """Entries (m11, m12, m22) of the joint-space inertia of two uniform rods."""
    lc2 = p.l2 / 2
    i1 = p.m1 * p.l1 * p.l1 / 12
    i2 = p.m2 * p.l2 * p.l2 / 12
    lc1 = p.l1 / 2
    d = p.m2 * lc2 * lc2 + i2
    e = p.m2 * p.l1 * lc2
    base = p.m1 * lc1 * lc1 + i1 + p.m2 * (p.l1 * p.l1 + lc2 * lc2) + i2
    c2 = dc.cos(q2)
    return base + 2.0 * e * c2, d + e * c2, d + 0.0 * c2


def arm_kinetic_energy(s, p: ArmParams):
    q2, dq1, dq2 = s[..., 1], s[..., 2], s[..., 3]
    m11, m12, m22 = arm_mass_matrix(q2, p)
    return 0.5 * (m11 * dq1 * dq1 + 2.0 * m12 * dq1 * dq2 + m22 * dq2 * dq2)


def two_link_accel(s, tau, p: ArmParams):
    """Joint accelerations from M(q) qdd + C(q, qd) qd + G(q) + b qd = tau."""
    q1, q2, dq1, dq2 = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    lc1 = p.l1 / 2
    lc2 = p.l2 / 2
    i2 = p.m2 * p.l2 * p.l2 / 12
    i1 = p.m1 * p.l1 * p.l1 / 12
    d = p.m2 * lc2 * lc2 + i2
    e = p.m2 * p.l1 * lc2
    base = p.m1 * lc1 * lc1 + i1 + p.m2 * (p.l1 * p.l1 + lc2 * lc2) + i2
    c2 = dc.cos(q2)
    h = e * dc.sin(q2)
    m11 = base + 2.0 * e * c2
    m12 = d + e * c2
    m22 = d
    r1 = tau[..., 0] + h * (2.0 * dq1 * dq2 + dq2 * dq2) - p.friction * dq1
    r2 = tau[..., 1] - h * dq1 * dq1 - p.friction * dq2
    if isinstance(p.gravity, dc.Expr) or p.gravity != 0.0:
        c12 = dc.cos(q1 + q2)
        g2 = p.m2 * lc2 * p.gravity * c12
        r1 = r1 - (p.m1 * lc1 + p.m2 * p.l1) * p.gravity * dc.cos(q1) - g2
        r2 = r2 - g2
    det = m11 * m22 - m12 * m12
    if not isinstance(det, dc.Expr) and not np.all(det > 1e-12):
        raise FloatingPointError("near-singular arm mass matrix")
    ddq1 = (m22 * r1 - m12 * r2) / det
    ddq2 = (m11 * r2 - m12 * r1) / det
    return ddq1, ddq2


def two_link_step(s, tau, p: ArmParams, dt: float):
    """Semi-implicit Euler step of the planar 2-link arm; torques are clamped first."""
    tau = dc.clip(tau, -p.torque_limit, p.torque_limit)
    ddq1, ddq2 = two_link_accel(s, tau, p)
    dq1 = s[..., 2] + dt * ddq1
    dq2 = s[..., 3] + dt * ddq2
    q1 = s[..., 0] + dt * dq1
    q2 = s[..., 1] + dt * dq2
    return dc.stack([q1, q2, dq1, dq2])


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class ScalarIntegrator:
    variant = "scalar-integrator"
    state_dim = 1
    action_dim = 1
    pos_dim = 1
    dt: float = 1.0

    def clamp(self, a):
        return a

    def step(self, s, a):
        return scalar_step(s, a)


@dataclass(frozen=True)
class PointMass2D:
    variant = "point-mass-2d"
    state_dim = 2
    action_dim = 2
    pos_dim = 2
    dt: float = 0.1
    action_scale: float = 1.0  # < 1 models weaker actuation at test time

    def clamp(self, a):
        return a

    def step(self, s, a):
        if self.action_scale != 1.0:
            a = a * self.action_scale
        return point_mass_step(s, a, self.dt)


@dataclass(frozen=True)
class TwoLinkArm:
    variant = "two-link-arm"
    state_dim = 4
    action_dim = 2
    pos_dim = 2
    params: ArmParams = field(default_factory=ArmParams)
    dt: float = 0.01

    def clamp(self, a):
        lim = self.params.torque_limit
        return dc.clip(a, -lim, lim)

    def step(self, s, a):
        return two_link_step(s, a, self.params, self.dt)


# ---------------------------------------------------------------------------
# tasks and trajectories


@dataclass(frozen=True)
class TaskSpec:
    goal: np.ndarray
    horizon: int
    cost: str = "minimize"

    def __post_init__(self):
        object.__setattr__(self, "goal", np.atleast_1d(np.asarray(self.goal, dtype=np.float64)))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.cost != "minimize":
            raise ValueError("only cost minimization is supported")


@dataclass
class Trajectory:
    """``states`` has T+1 entries, ``actions`` and T, ``costs`` T+1.

    Value-only rollouts hold arrays with time as the leading axis;
    differentiable rollouts hold lists of expressions.
    """

    states: Sequence
    actions: Sequence
    costs: Sequence

    @property
    def horizon(self) -> int:
        return len(self.actions)

    @property
    def final_state(self):
        return self.states[-1]


def terminal_cost(s_final, goal):
    """Squared distance between the position block of ``s_final`` and ``goal``."""
    gdim = goal.shape[-1]
    if s_final.shape[-1] < gdim:
        raise ValueError(f"goal width {gdim} exceeds state width {s_final.shape[-1]}")
    diff = s_final[..., :gdim] - goal
    return dc.sum_(diff * diff, axis=-1)


def terminal_task_cost(traj: Trajectory, goal):
    c = terminal_cost(traj.final_state, np.atleast_1d(goal) if not isinstance(goal, dc.Expr) else goal)
    if isinstance(c, np.ndarray) and c.shape == ():
        return float(c)
    return c


def toy_sparse_cost(t: int, T: int, s, g) -> float:
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    if t < T:
        return 0.0
    return float((s - g) ** 2)


def rollout(policy: Callable, model, s0, task: TaskSpec, differentiable: bool = False) -> Trajectory:
    """Unroll ``a_t = policy(s_t)``, ``s_{t+1} = f(s_t, a_t)`` for ``task.horizon`` steps.

    ``s0`` may carry a leading batch axis; ``task.goal`` then either broadcasts
    or carries the same batch axis.
    """
    T = task.horizon
    goal = task.goal
    if differentiable:
        s = s0 if isinstance(s0, dc.Expr) else dc.const(s0)
        states, actions = [s], []
        for _ in range(T):
            a = model.clamp(policy(s))
            s = model.step(s, a)
            actions.append(a)
            states.append(s)
        zero = np.zeros(tuple(s.shape[:-1]))
        costs = [zero] * T + [terminal_cost(s, goal)]
        return Trajectory(states, actions, costs)

    s = np.asarray(s0, dtype=np.float64)
    states, actions = [s], []
    for t in range(T):
        a = np.asarray(model.clamp(policy(s)), dtype=np.float64)
        s = np.asarray(model.step(s, a), dtype=np.float64)
        if not np.isfinite(s).all():
            raise RolloutError(t + 1)
        actions.append(a)
        states.append(s)
    zero = np.zeros(s.shape[:-1])
    costs = [zero] * T + [terminal_cost(s, goal)]
    return Trajectory(np.stack(states), np.stack(actions), np.stack(costs))


def write_trajectory_csv(traj: Trajectory, path) -> Path:
    """Dump a single (unbatched) value-only trajectory as ``t, s*, a*, r``."""
    states = np.asarray(traj.states)
    actions = np.asarray(traj.actions)
    costs = np.asarray(traj.costs)
    if states.ndim != 2:
        raise ValueError("trajectory CSV needs an unbatched trajectory")
    sd, ad = states.shape[1], actions.shape[1]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t"] + [f"s{i}" for i in range(sd)] + [f"a{i}" for i in range(ad)] + ["r"])
        for t in range(len(states)):
            a = actions[t] if t < len(actions) else [""] * ad
            w.writerow([t] + [repr(float(x)) for x in states[t]]
                       + [repr(float(x)) if x != "" else "" for x in a] + [repr(float(costs[t]))])
    return path

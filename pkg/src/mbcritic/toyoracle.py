"""Closed forms for the horizon-2 scalar toy problem.

Toy problem: ``s_{t+1} = s_t + a_t``, ``a_t = theta``, critic/Q ``(s + a)^2 * phi_1``,
sparse cost ``(s_T - g)^2`` at ``T = 2``.  Each closed form has a brute-force
twin (grid scan or root bracketing) that shares no algebra with it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .dynamics import ScalarIntegrator, TaskSpec, rollout, toy_sparse_cost

HORIZON = 2


class DegenerateInstance(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class ToyInstance:
    s0: float
    goal: float
    phi1: float = 0.0
    theta: float = 0.0
    horizon: int = HORIZON

    def __post_init__(self):
        if self.horizon != HORIZON:
            raise ValueError("toy closed forms are specific to T=2")

    @property
    def s1(self) -> float:
        return self.s0 + self.theta


def optimal_policy(s0: float, g: float) -> float:
    return (g - s0) / 2


def meta_optimal_phi(s0: float, s1: float, theta: float, g: float) -> float:
    """phi_1 at which the task loss after one critic step (alpha = 1/2) is stationary."""
    c = s0 + s1 + 2 * theta
    if c == 0:
        raise DegenerateInstance("s0 + s1 + 2*theta == 0")
    return (s0 + 2 * theta - g) / (2 * c)


def supq_optimal_phi(s0: float, s1: float, a: float, r2: float) -> float:
    """phi_1 minimising the TD error of the toy Q on one horizon-2 rollout (gamma = 1)."""
    A = (s0 + a) ** 2
    B = (s1 + a) ** 2
    den = (A - B) ** 2 + B**2
    if den == 0:
        raise DegenerateInstance("TD objective is flat in phi_1")
    return B * r2 / den


def supq_policy_fixed_point(s0: float, s1: float) -> float:
    return -(s0 + s1) / 2


def metacritic_scalar_fixed_point(s0: float, s1: float, a: float) -> float:
    """Convergence point of the two-critic (Q + meta-Q) scalar analysis."""
    den = 2 * ((s0 + a) ** 2 + (s1 + a) ** 2)
    if den == 0:
        raise DegenerateInstance("(s0+a)^2 + (s1+a)^2 == 0")
    return -(s0 + s1) / den


def true_q_return(policy, model, s0, task: TaskSpec) -> float:
    """On-policy return: sum of per-step costs of a value-only rollout."""
    traj = rollout(policy, model, np.atleast_1d(np.asarray(s0, dtype=np.float64)), task)
    return float(np.sum(traj.costs))


def toy_return(theta: float, s0: float, g: float) -> float:
    task = TaskSpec([g], HORIZON)
    return true_q_return(lambda s: np.full_like(s, theta), ScalarIntegrator(), [s0], task)


def toy_return_by_steps(theta: float, s0: float, g: float) -> float:
    """Same quantity, summed step by step from the piecewise cost definition."""
    s, total = s0, 0.0
    for t in range(HORIZON + 1):
        total += toy_sparse_cost(t, HORIZON, s, g)
        s = s + theta
    return total


# ---------------------------------------------------------------------------
# brute-force twins


def toy_task_loss(phi1: float, s0: float, s1: float, theta: float, g: float) -> float:
    """Task loss after one alpha=1/2 critic step, evaluated by explicit unrolling."""
    grad_theta = 2 * phi1 * ((s0 + theta) + (s1 + theta))
    theta_new = theta - 0.5 * grad_theta
    s = s0
    for _ in range(HORIZON):
        s = s + theta_new
    return (s - g) ** 2


def toy_td_error(phi1: float, s0: float, s1: float, a: float, r2: float, gamma: float = 1.0) -> float:
    q0 = (s0 + a) ** 2 * phi1
    q1 = (s1 + a) ** 2 * phi1
    return (q0 - (0.0 + gamma * q1)) ** 2 + (q1 - (0.0 + gamma * r2)) ** 2


def meta_phi_by_root(s0: float, s1: float, theta: float, g: float,
                     lo: float = -1e3, hi: float = 1e3, h: float = 1e-6) -> float:
    """Root of a central-difference derivative of the unrolled task loss."""
    def d(p):
        return (toy_task_loss(p + h, s0, s1, theta, g) - toy_task_loss(p - h, s0, s1, theta, g)) / (2 * h)
    return brentq(d, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)


def grid_argmin(f, lo: float, hi: float, step: float) -> float:
    xs = np.arange(lo, hi + step / 2, step)
    vals = np.array([f(x) for x in xs])
    return float(xs[int(np.argmin(vals))])


def supq_phi_by_scan(s0, s1, a, r2, lo=-20.0, hi=20.0, step=1e-4) -> float:
    xs = np.arange(lo, hi + step / 2, step)
    A = (s0 + a) ** 2
    B = (s1 + a) ** 2
    vals = (A * xs - B * xs) ** 2 + (B * xs - r2) ** 2
    return float(xs[int(np.argmin(vals))])

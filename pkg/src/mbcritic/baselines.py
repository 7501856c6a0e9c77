"""Supervised Q fitting with deterministic policy gradients (the comparison critic).

The Q function is fitted on the squared temporal-difference residual with
SARSA-style pairing ``Q(s_{t+1}, a_{t+1})``; the residual is differentiated
through both sides.  Goal conditioning shifts positions to ``s - g`` for both
the Q function and the policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .dynamics import TaskSpec, rollout, terminal_cost
from .metacritic import MetaTrainRecord, Task, _task_arrays, make_optimizer
from .toyoracle import metacritic_scalar_fixed_point  # noqa: F401  (re-export)


class FitDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class QLearningConfig:
    gamma: float = 0.9
    q_lr: float = 1e-3
    policy_lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10  # Q minibatch steps per iteration
    policy_steps: int = 1
    optimizer: str = "adam"
    iterations: int = 100
    grad_tol: float = 0.0
    noise_std: float = 0.0
    capacity: int = 200_000
    seed: int = 0
    divergence: float = 1e6

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


@dataclass
class ReplayDataset:
    """Transitions ``(s, a, r, s', a', done, r_T, g)``; ``a'`` is the action taken at ``s'``.

    For the last transition of a rollout (``done``) the bootstrap target is the
    terminal cost ``r_T`` instead of ``Q(s', a')``.
    """

    capacity: int = 200_000
    cols: dict = field(default_factory=dict)

    def __len__(self):
        return 0 if not self.cols else len(self.cols["s"])

    def add_rollout(self, states, actions, costs, goal):
        """Add a value-only rollout; arrays are time-major, optionally with a batch axis."""
        states, actions, costs = np.asarray(states), np.asarray(actions), np.asarray(costs)
        if states.ndim == 2:
            states, actions, costs = states[:, None], actions[:, None], costs[:, None]
        T, B = actions.shape[0], actions.shape[1]
        goal = np.broadcast_to(np.atleast_1d(goal), (B, np.atleast_1d(goal).shape[-1]))
        new = {k: [] for k in ("s", "a", "r", "s2", "a2", "done", "rT", "g")}
        for t in range(T):
            last = t == T - 1
            new["s"].append(states[t])
            new["a"].append(actions[t])
            new["r"].append(costs[t])
            new["s2"].append(states[t + 1])
            new["a2"].append(actions[t] if last else actions[t + 1])
            new["done"].append(np.full(B, 1.0 if last else 0.0))
            new["rT"].append(costs[T] if last else np.zeros(B))
            new["g"].append(goal)
        for k, v in new.items():
            arr = np.concatenate(v, axis=0) if v[0].ndim > 1 else np.concatenate(v)
            self.cols[k] = arr if k not in self.cols else np.concatenate([self.cols[k], arr])[-self.capacity:]

    def batch(self, idx=None) -> dict:
        if idx is None:
            return dict(self.cols)
        return {k: v[idx] for k, v in self.cols.items()}


def q_td_loss(q, q_params, batch: dict, gamma: float):
    """Sum over the batch of ``(Q(s,a) - (r + gamma * [done ? r_T : Q(s',a')]))^2``."""
    qs = q(q_params, batch["s"], batch["a"], batch["g"])
    qn = q(q_params, batch["s2"], batch["a2"], batch["g"])
    done = batch["done"]
    target = batch["r"] + gamma * (done * batch["rT"] + (1.0 - done) * qn)
    resid = qs - target
    return dc.sum_(resid * resid)


class _TDProgram:
    def __init__(self, q, n: int, state_dim: int, action_dim: int, goal_dim: int, gamma: float):
        self.phi = dc.inp("phi", (q.n_params,))
        shapes = {"s": (n, state_dim), "a": (n, action_dim), "r": (n,), "s2": (n, state_dim),
                  "a2": (n, action_dim), "done": (n,), "rT": (n,), "g": (n, goal_dim)}
        self.vars = {k: dc.inp(k, s) for k, s in shapes.items()}
        self.loss = q_td_loss(q, self.phi, self.vars, gamma)
        (self.g,) = dc.grad(self.loss, [self.phi])
        self.program = dc.Program([self.loss, self.g])

    def __call__(self, phi, batch):
        b = dict(batch)
        b["phi"] = phi
        return self.program(b)


def fit_q(dataset: ReplayDataset, cfg: QLearningConfig, q, q_params=None, *,
          steps: int | None = None, full_batch: bool = False, rng=None,
          program: _TDProgram | None = None, trace: list | None = None) -> np.ndarray:
    """Descend on the TD loss.

    ``full_batch`` runs plain gradient steps on the whole dataset until the
    gradient norm falls below ``cfg.grad_tol`` (or ``steps`` is exhausted);
    otherwise ``steps`` (default ``cfg.epochs``) minibatch steps are taken.
    """
    if len(dataset) == 0:
        raise ValueError("fit_q needs a nonempty dataset")
    phi = np.array(q.init(cfg.seed) if q_params is None else q_params, dtype=np.float64)
    data = dataset.batch()
    n = len(dataset) if full_batch else cfg.batch_size
    sd, ad, gd = data["s"].shape[1], data["a"].shape[1], data["g"].shape[1]
    prog = program or _TDProgram(q, n, sd, ad, gd, cfg.gamma)
    opt = make_optimizer(cfg.optimizer, cfg.q_lr)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    steps = (cfg.epochs if not full_batch else 10**6) if steps is None else steps
    for _ in range(steps):
        batch = data if full_batch else dataset.batch(rng.integers(0, len(dataset), size=n))
        loss, g = prog(phi, batch)
        if trace is not None:
            trace.append(float(loss))
        if not np.isfinite(loss) or loss > cfg.divergence * max(1, n):
            raise FitDiverged(f"TD loss {loss}")
        if float(np.linalg.norm(g)) < cfg.grad_tol:
            break
        phi = opt.step(phi, g)
    return phi


class _DPGProgram:
    """``grad_theta sum Q(s_t, pi_theta(s_t), g)`` for one shared policy over fixed states."""

    def __init__(self, q, policy, n: int, state_dim: int, goal_dim: int, conditioned: bool):
        self.theta = dc.inp("theta", (policy.n_params,))
        self.phi = dc.inp("phi", (q.n_params,))
        self.s = dc.inp("s", (n, state_dim))
        self.goal = dc.inp("g", (n, goal_dim))
        obs = goal_shift(self.s, self.goal) if conditioned else self.s
        a = policy(self.theta, obs)
        total = dc.sum_(q(self.phi, self.s, a, self.goal))
        (self.g,) = dc.grad(total, [self.theta])
        self.program = dc.Program([self.g])

    def __call__(self, theta, phi, s, goal):
        (g,) = self.program({"theta": theta, "phi": phi, "s": s, "g": goal})
        return g


def goal_shift(s, g):
    """``s - g`` on the position block, velocities untouched."""
    gd = g.shape[-1]
    if s.shape[-1] == gd:
        return s - g
    return dc.concat([s[..., :gd] - g, s[..., gd:]], axis=-1)


def policy_from_q(q, q_params, theta0, cfg: QLearningConfig, states, goal=None, *, policy,
                  steps: int | None = None, conditioned: bool = False,
                  program: _DPGProgram | None = None) -> np.ndarray:
    """Deterministic policy gradient descent on ``sum_t Q(s_t, pi_theta(s_t))`` over fixed states."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if goal is None:
        goal = np.zeros((len(states), 1))
    goal = np.broadcast_to(np.atleast_2d(goal), (len(states), np.atleast_2d(goal).shape[-1]))
    prog = program or _DPGProgram(q, policy, len(states), states.shape[1], goal.shape[1], conditioned)
    theta = np.array(theta0, dtype=np.float64)
    steps = cfg.policy_steps if steps is None else steps
    for _ in range(steps):
        g = prog(theta, q_params, states, goal)
        if float(np.linalg.norm(g)) < cfg.grad_tol:
            break
        theta = theta - cfg.policy_lr * g
    return theta


@dataclass
class DDPGResult:
    q_params: np.ndarray
    theta: np.ndarray
    record: MetaTrainRecord


def ddpg_train(env, tasks: Sequence[Task], cfg: QLearningConfig, *, q, policy, horizon: int,
               q_params=None, theta0=None) -> DDPGResult:
    """Interleave rollouts, TD fitting and policy updates with a goal-conditioned policy.

    The record's rows hold the terminal cost of each task's rollout at the
    start of every iteration, so its curve is comparable with meta-training.
    """
    if not tasks:
        raise ValueError("ddpg_train needs at least one task")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    s0, goals = _task_arrays(tasks)
    B = len(tasks)
    phi = np.array(q.init(cfg.seed) if q_params is None else q_params, dtype=np.float64)
    theta = np.array(policy.init(np.random.SeedSequence([cfg.seed, 11])) if theta0 is None else theta0)
    data = ReplayDataset(cfg.capacity)
    td = None
    dpg = _DPGProgram(q, policy, B * horizon, env.state_dim, goals.shape[1], conditioned=True)
    task = TaskSpec(goals, horizon)  # per-task goals: terminal costs are measured against them
    rec = MetaTrainRecord()
    for it in range(cfg.iterations):
        def act(s):
            a = policy(theta, goal_shift(s, goals))
            if cfg.noise_std > 0:
                a = a + cfg.noise_std * rng.standard_normal(a.shape)
            return a
        try:
            tr = rollout(act, env, s0, task)
        except FloatingPointError:
            rec.diverged = True
            break
        costs = np.asarray(tr.costs)
        for b, t in enumerate(tasks):
            rec.rows.append((it, t.goal_id, t.init_id, float(costs[-1, b])))
        if np.max(costs[-1]) > cfg.divergence:
            rec.diverged = True
            break
        data.add_rollout(tr.states, tr.actions, costs, goals)
        if td is None:
            td = _TDProgram(q, cfg.batch_size, env.state_dim, env.action_dim, goals.shape[1], cfg.gamma)
        try:
            phi = fit_q(data, cfg, q, phi, rng=rng, program=td)
        except FloatingPointError:
            rec.diverged = True
            break
        states = np.asarray(tr.states)[:horizon].reshape(horizon * B, -1)
        g_rep = np.tile(goals, (horizon, 1))
        theta = policy_from_q(q, phi, theta, cfg, states, g_rep, policy=policy, conditioned=True,
                              program=dpg)
    return DDPGResult(phi, theta, rec)

"""Model-based bi-level meta-learning of a critic.

Inner loop: ``theta_new = theta - alpha * grad_theta sum_t critic(s_t, pi_theta(s_t), g)``
with the rollout states held fixed (the critic gradient is a model-free policy
gradient).  Outer loop: roll ``pi_theta_new`` through the differentiable model,
score the terminal error and descend on the critic parameters through the
inner update.

Tasks are processed as one batch: the policy parameters have shape ``(B, P)``,
one row per (goal, initial state) pair, and the objective graph is compiled
once and re-evaluated with fresh bindings every iteration.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .dynamics import TaskSpec, rollout, terminal_cost

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InnerLoopConfig:
    alpha: float = 1e-2
    steps: int = 1
    outer_loss: str = "final"  # "final" | "all": score only theta_k, or sum over theta_1..theta_k

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("inner steps must be >= 1")
        if self.outer_loss not in ("final", "all"):
            raise ValueError(f"unknown outer_loss {self.outer_loss!r}")


@dataclass(frozen=True)
class OuterLoopConfig:
    iterations: int = 100
    lr: float = 1e-3
    optimizer: str = "adam"  # "adam" | "sgd"
    phi_steps: int = 1  # critic updates per rollout
    phi_tol: float = 0.0  # stop phi_steps early below this gradient norm
    policy_reset: str = "each-iteration"  # "each-iteration" | "carry"
    reset_every: int = 0  # carry mode: re-initialise the policies every N iterations (0 = never)
    seed: int = 0
    divergence: float = 1e6
    clip_grad: float | None = None


@dataclass(frozen=True)
class Task:
    goal: np.ndarray
    s0: np.ndarray
    goal_id: int = 0
    init_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "goal", np.atleast_1d(np.asarray(self.goal, dtype=np.float64)))
        object.__setattr__(self, "s0", np.atleast_1d(np.asarray(self.s0, dtype=np.float64)))


def make_tasks(goals, initial_states) -> list[Task]:
    return [Task(g, s, gi, si) for gi, g in enumerate(goals) for si, s in enumerate(initial_states)]


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, x, g):
        return x - self.lr * g


class Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, x, g):
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# graph pieces


def critic_sum(critic, phi, states, actions, goal):
    """Sum of per-step critic values over the steps that carry an action.

    ``states`` may hold T or T+1 entries along the time axis (the axis just
    before the feature axis); only the first T are paired with actions.
    """
    T = actions.shape[-2]
    if states.shape[-2] == T + 1:
        states = states[..., :T, :]
    return dc.sum_(critic(phi, states, actions, goal))


def _batched_states(traj_states, T):
    """(T+1, B, d) time-major rollout states -> (B, T, d) for the critic."""
    if isinstance(traj_states, (list, tuple)):
        parts = [dc.reshape(s, tuple(s.shape[:-1]) + (1, s.shape[-1])) for s in traj_states[:T]]
        return dc.concat(parts, axis=-2)
    return np.swapaxes(np.asarray(traj_states)[:T], 0, 1)


def inner_update(theta, critic, phi, policy, states, goal, cfg: InnerLoopConfig,
                 model=None, s0=None, horizon=None, return_all: bool = False):
    """``theta - alpha * grad_theta critic_sum``, keeping the dependence on ``phi``.

    ``states`` are the (B, T, d) states of the rollout that produced ``theta``'s
    data; they are treated as observations.  With ``cfg.steps > 1`` the later
    rollouts are taken through ``model`` and also held fixed.
    ``return_all`` returns every iterate ``[theta_1, ..., theta_k]``.
    """
    theta_expr = theta if isinstance(theta, dc.Expr) else dc.const(theta)
    iterates = []
    for k in range(cfg.steps):
        if k > 0:
            if model is None:
                raise ValueError("multi-step inner updates need a model for fresh rollouts")
            tr = rollout(lambda s: policy(dc.stopgrad(theta_expr), s), model, s0,
                         TaskSpec(np.zeros(goal.shape[-1]), horizon), differentiable=True)
            states = dc.stopgrad(_batched_states(tr.states, horizon))
        actions = policy(theta_expr, states)
        c = critic_sum(critic, phi, states, actions, goal)
        (g,) = dc.grad(c, [theta_expr])
        theta_expr = theta_expr - cfg.alpha * g
        iterates.append(theta_expr)
    return iterates if return_all else theta_expr


def outer_task_loss(theta_new, policy, model, s0, goal, horizon: int, per_task: bool = False):
    """Terminal task cost of ``pi_theta_new`` unrolled through ``model``."""
    tr = rollout(lambda s: policy(theta_new, s), model, s0, TaskSpec(np.zeros(goal.shape[-1]), horizon),
                 differentiable=True)
    c = terminal_cost(tr.final_state, goal)
    return c if per_task else dc.sum_(c)


# ---------------------------------------------------------------------------
# meta-train


@dataclass
class MetaTrainRecord:
    rows: list = field(default_factory=list)  # (iteration, goal_id, init_id, task_loss)
    theta_trace: list = field(default_factory=list)  # (iteration, goal_id, init_id, theta_new)
    phi_trace: list = field(default_factory=list)
    rounds: list = field(default_factory=list)  # carry mode: (iteration, theta, s1, phi)
    diverged: bool = False
    final_theta: np.ndarray | None = None

    def losses(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])

    def curve(self, reduce=np.median) -> np.ndarray:
        """Per-iteration reduction of the task losses."""
        its = sorted({r[0] for r in self.rows})
        by_it = {i: [] for i in its}
        for r in self.rows:
            by_it[r[0]].append(r[3])
        return np.array([reduce(by_it[i]) for i in its])

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "goal_id", "init_id", "task_loss"])
            for it, gi, si, loss in self.rows:
                w.writerow([it, gi, si, repr(float(loss))])
        return path

    def theta_trace_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            n = len(self.theta_trace[0][3]) if self.theta_trace else 0
            w.writerow(["iteration", "goal_id", "init_id"] + [f"theta{i}" for i in range(n)])
            for it, gi, si, th in self.theta_trace:
                w.writerow([it, gi, si] + [repr(float(x)) for x in th])
        return path


class MetaObjective:
    """Compiled bi-level objective for a fixed batch of tasks.

    Inputs: ``phi`` (P_phi,), ``theta`` (B, P), ``s0`` (B, d_s), ``goal`` (B, d_g).
    Outputs: per-task losses of the final iterate (B,), grad_phi (P_phi,),
    theta_new (B, P).
    """

    def __init__(self, policy, critic, model, horizon: int, n_tasks: int, goal_dim: int,
                 inner: InnerLoopConfig, cap: int | None = None):
        B, P = n_tasks, policy.n_params
        self.phi = dc.inp("phi", (critic.n_params,))
        self.theta = dc.inp("theta", (B, P))
        self.s0 = dc.inp("s0", (B, model.state_dim))
        self.goal = dc.inp("goal", (B, goal_dim))
        tr = rollout(lambda s: policy(dc.stopgrad(self.theta), s), model, self.s0,
                     TaskSpec(np.zeros(goal_dim), horizon), differentiable=True)
        states = dc.stopgrad(_batched_states(tr.states, horizon))
        iterates = inner_update(self.theta, critic, self.phi, policy, states, self.goal, inner,
                                model=model, s0=self.s0, horizon=horizon, return_all=True)
        self.theta_new = iterates[-1]
        self.losses = outer_task_loss(self.theta_new, policy, model, self.s0, self.goal, horizon,
                                      per_task=True)
        total = dc.sum_(self.losses)
        if inner.outer_loss == "all":
            for th in iterates[:-1]:
                total = total + outer_task_loss(th, policy, model, self.s0, self.goal, horizon)
        (self.grad_phi,) = dc.grad(total, [self.phi])
        self.program = dc.Program([self.losses, self.grad_phi, self.theta_new], cap=cap)

    def __call__(self, phi, theta, s0, goal):
        return self.program({"phi": phi, "theta": theta, "s0": s0, "goal": goal})


def _task_arrays(tasks: Sequence[Task]):
    return np.stack([t.s0 for t in tasks]), np.stack([t.goal for t in tasks])


def init_policies(policy, tasks, seed: int, iteration: int) -> np.ndarray:
    return np.stack([
        policy.init(np.random.SeedSequence([seed, iteration, b])) for b in range(len(tasks))
    ])


def meta_train(cfg: OuterLoopConfig, inner: InnerLoopConfig, model, tasks: Sequence[Task], *,
               policy, critic, horizon: int, phi0: np.ndarray | None = None,
               theta0: np.ndarray | None = None, trace_theta: bool | None = None,
               objective: MetaObjective | None = None):
    """Meta-train the critic; returns ``(phi, MetaTrainRecord)``.

    With ``policy_reset="each-iteration"`` every task gets a freshly initialised
    policy per outer iteration.  With ``"carry"`` the updated policy is kept,
    which makes the critic and the policy converge jointly.
    """
    if not tasks:
        raise ValueError("meta_train needs at least one task")
    if cfg.policy_reset not in ("each-iteration", "carry"):
        raise ValueError(f"unknown policy_reset {cfg.policy_reset!r}")
    s0, goals = _task_arrays(tasks)
    obj = objective or MetaObjective(policy, critic, model, horizon, len(tasks), goals.shape[1], inner)
    phi = np.array(critic.init(cfg.seed) if phi0 is None else phi0, dtype=np.float64)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    if trace_theta is None:
        trace_theta = policy.n_params <= 16
    rec = MetaTrainRecord()
    theta = None
    if cfg.policy_reset == "carry":
        theta = init_policies(policy, tasks, cfg.seed, 0) if theta0 is None else np.array(theta0, dtype=np.float64)

    for it in range(cfg.iterations):
        if cfg.policy_reset == "each-iteration":
            theta = init_policies(policy, tasks, cfg.seed, it) if (theta0 is None or it > 0) else np.array(theta0)
        elif cfg.reset_every and it > 0 and it % cfg.reset_every == 0:
            theta = init_policies(policy, tasks, cfg.seed, it)
        try:
            losses, gphi, theta_new = obj(phi, theta, s0, goals)
        except FloatingPointError as e:
            log.warning("iteration %d: %s", it, e)
            rec.diverged = True
            break
        for b, t in enumerate(tasks):
            rec.rows.append((it, t.goal_id, t.init_id, float(losses[b])))
            if trace_theta:
                rec.theta_trace.append((it, t.goal_id, t.init_id, theta_new[b].copy()))
        if np.max(losses) > cfg.divergence:
            rec.diverged = True
            break
        for k in range(cfg.phi_steps):
            if k > 0:
                losses, gphi, theta_new = obj(phi, theta, s0, goals)
            gn = float(np.linalg.norm(gphi))
            if gn < cfg.phi_tol:
                break
            if cfg.clip_grad is not None and gn > cfg.clip_grad:
                gphi = gphi * (cfg.clip_grad / gn)
            phi = opt.step(phi, gphi)
        if critic.n_params <= 16:
            rec.phi_trace.append(phi.copy())
        if cfg.policy_reset == "carry":
            # theta_new comes from the last evaluation, i.e. before the final phi step
            s1 = np.asarray(model.step(s0, model.clamp(policy(theta, s0))))
            rec.rounds.append((it, theta.copy(), s1, phi.copy()))
            theta = theta_new
    rec.final_theta = None if theta is None else np.array(theta)
    return phi, rec


# ---------------------------------------------------------------------------
# meta-test


class CriticPolicyGradient:
    """Compiled ``grad_theta critic_sum`` for a batch of B policies over T steps."""

    def __init__(self, policy, critic, n_policies: int, horizon: int, state_dim: int, goal_dim: int):
        B, P = n_policies, policy.n_params
        self.theta = dc.inp("theta", (B, P))
        self.states = dc.inp("states", (B, horizon, state_dim))
        self.goal = dc.inp("goal", (B, goal_dim))
        self.phi = dc.inp("phi", (critic.n_params,))
        actions = policy(self.theta, self.states)
        total = critic_sum(critic, self.phi, self.states, actions, self.goal)
        (g,) = dc.grad(total, [self.theta])
        self.program = dc.Program([g])

    def __call__(self, phi, theta, states, goal):
        (g,) = self.program({"phi": phi, "theta": theta, "states": states, "goal": goal})
        return g


@dataclass
class MetaTestResult:
    theta: np.ndarray  # (B, P)
    curve: np.ndarray  # (iterations + 1, B) terminal cost before each update and after the last
    differentiated_env: bool = False

    @property
    def final_cost(self) -> np.ndarray:
        return self.curve[-1]


def meta_test(critic, phi, tasks: Sequence[Task], env, cfg: InnerLoopConfig, iterations: int, *,
              policy, horizon: int, seed: int = 0, theta0: np.ndarray | None = None,
              init_ids: Sequence[int] | None = None, grad_fn: CriticPolicyGradient | None = None,
              max_grad_norm: float | None = None) -> MetaTestResult:
    """Learn fresh policies with the frozen critic; ``env`` is only ever stepped on values.

    Each task row gets its own policy initialised from ``(seed, init_id)``.
    """
    s0, goals = _task_arrays(tasks)
    B = len(tasks)
    if theta0 is None:
        ids = [t.init_id for t in tasks] if init_ids is None else list(init_ids)
        theta = np.stack([policy.init(np.random.SeedSequence([seed, 10**6 + i])) for i in ids])
    else:
        theta = np.array(theta0, dtype=np.float64).reshape(B, policy.n_params)
    gfun = grad_fn or CriticPolicyGradient(policy, critic, B, horizon, env.state_dim, goals.shape[1])
    task = TaskSpec(np.zeros(goals.shape[1]), horizon)
    curve = []
    for _ in range(iterations):
        tr = rollout(lambda s: policy(theta, s), env, s0, task, differentiable=False)
        curve.append(np.asarray(terminal_cost(tr.final_state, goals)))
        states = _batched_states(tr.states, horizon)
        g = gfun(phi, theta, states, goals)
        if max_grad_norm is not None:
            n = np.linalg.norm(g, axis=1, keepdims=True)
            g = g * np.minimum(1.0, max_grad_norm / np.maximum(n, 1e-300))
        theta = theta - cfg.alpha * g
    tr = rollout(lambda s: policy(theta, s), env, s0, task, differentiable=False)
    curve.append(np.asarray(terminal_cost(tr.final_state, goals)))
    return MetaTestResult(theta, np.stack(curve))

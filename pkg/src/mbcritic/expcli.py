"""Experiment harness: JSON configs, run drivers and the ``mbcritic`` command line.

Every output file is a pure function of the config and the seed.  Floats are
written with ``repr`` so reruns produce byte-identical CSVs, and the run
manifest records only the config hash and library versions (no timestamps).
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import diffcore as dc
from . import toyoracle as toy
from .baselines import (FitDiverged, QLearningConfig, ReplayDataset, ddpg_train, fit_q, policy_from_q,
                        q_td_loss)
from .dynamics import ArmParams, PointMass2D, ScalarIntegrator, TaskSpec, TwoLinkArm, rollout
from .landscape import GridSpec, cell_distance, landscape_grid
from .metacritic import (InnerLoopConfig, MetaTrainRecord, OuterLoopConfig, Task, inner_update, make_tasks,
                         meta_test, meta_train, outer_task_loss)
from .nets import (ConstantPolicy, MlpConfig, MlpCritic, MlpPolicy, QuadraticCritic,
                   QuadraticFormCritic, critic_config, load_checkpoint, save_checkpoint)

log = logging.getLogger("mbcritic")

VERSION = "0.1.0"
ENVIRONMENTS = ("toy", "point-mass", "reacher2")
METHODS = ("meta", "supervised")
METHOD_LABELS = {"meta": "meta-critic (ours)", "supervised": "supervised-Q"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema


@dataclass(frozen=True)
class PolicySpec:
    kind: str = "mlp"  # "mlp" | "constant"
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    out_init: float | None = None
    init_range: tuple = (-1.0, 1.0)  # constant policies only


@dataclass(frozen=True)
class CriticSpec:
    kind: str = "mlp"  # "mlp" | "quadratic-form" | "toy"
    hidden: tuple = (400, 400)
    activation: str = "elu"
    goal_mode: str = "concat"
    rank: int = 4


@dataclass(frozen=True)
class DynamicsSpec:
    dt: float | None = None  # None -> the model's default
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 0.5
    l2: float = 0.5
    friction: float = 0.1
    torque_limit: float = 5.0
    gravity: float = 0.0
    action_scale: float = 1.0  # point mass only


@dataclass(frozen=True)
class BaselineSpec:
    critic: dict = field(default_factory=dict)  # CriticSpec overrides for the Q function
    gamma: float = 0.9
    q_lr: float = 1e-3
    policy_lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    policy_steps: int = 1
    optimizer: str = "adam"
    iterations: int = 100
    noise_std: float = 0.0
    dataset_rollouts: int = 50  # point mass / toy: random constant-action rollouts for the fit
    fit_steps: int = 3000
    test_alpha: float | None = None  # meta-test step size with the Q critic (None -> policy_lr)
    test_iterations: int | None = None  # None -> meta_test.iterations


@dataclass(frozen=True)
class MetaTestSpec:
    iterations: int = 1
    inits: int = 5  # fresh policies per goal
    alpha: float | None = None  # None -> inner.alpha
    max_grad_norm: float | None = None
    goals: list | None = None  # None -> training goals
    mass: float = 1.0  # multiplier on both link masses
    lengths: list | None = None  # [l1, l2]
    action_scale: float | None = None


@dataclass(frozen=True)
class SweepSpec:
    kind: str = "goals"  # "goals" | "mass" | "length"
    values: list = field(default_factory=list)
    goals_per_cell: int = 10
    policies_per_cell: int = 5
    base_goals: list = field(default_factory=lambda: [0, 1])  # goal sweeps sample around these

    def __post_init__(self):
        if self.kind not in ("goals", "mass", "length"):
            raise ConfigError(f"unknown sweep kind {self.kind!r}")
        if not self.values:
            raise ConfigError(f"{self.kind} sweep needs a nonempty value list")
        if self.goals_per_cell < 1 or self.policies_per_cell < 1:
            raise ConfigError("goals_per_cell and policies_per_cell must be >= 1")


@dataclass(frozen=True)
class LandscapeSpec:
    theta1: tuple = (-2.0, 2.0)
    theta2: tuple = (-2.0, 2.0)
    resolution: int = 41
    s0: list | None = None  # None -> first training initial state
    eval_goals: list = field(default_factory=list)  # unseen goals (the training goals are always included)


_SECTIONS = {
    "policy": PolicySpec, "critic": CriticSpec, "dynamics": DynamicsSpec, "inner": InnerLoopConfig,
    "outer": OuterLoopConfig, "baseline": BaselineSpec, "meta_test": MetaTestSpec,
    "landscape": LandscapeSpec,
}


@dataclass(frozen=True)
class ExperimentConfig:
    environment: str = "reacher2"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    horizon: int = 100
    goals: list = field(default_factory=list)
    initial_states: list = field(default_factory=list)
    methods: list = field(default_factory=lambda: ["meta", "supervised"])
    solved_threshold: float = 0.05
    out: str = "runs"
    policy: PolicySpec = field(default_factory=PolicySpec)
    critic: CriticSpec = field(default_factory=CriticSpec)
    dynamics: DynamicsSpec = field(default_factory=DynamicsSpec)
    inner: InnerLoopConfig = field(default_factory=InnerLoopConfig)
    outer: OuterLoopConfig = field(default_factory=OuterLoopConfig)
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    meta_test: MetaTestSpec = field(default_factory=MetaTestSpec)
    landscape: LandscapeSpec = field(default_factory=LandscapeSpec)
    sweeps: list = field(default_factory=list)  # of SweepSpec

    def __post_init__(self):
        if self.environment not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.environment!r}")
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if not self.goals or not self.initial_states:
            raise ConfigError("goals and initial_states must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


ENV_DEFAULTS = {
    "toy": {
        "seeds": [0], "horizon": 2, "goals": [[0.0]], "initial_states": [[-6.0]],
        "policy": {"kind": "constant", "init_range": [0.0, 0.0]},
        "critic": {"kind": "toy"},
        "inner": {"alpha": 0.5},
        "outer": {"iterations": 3, "lr": 1e-3, "optimizer": "sgd", "phi_steps": 20000, "phi_tol": 1e-12,
                  "policy_reset": "carry"},
        "baseline": {"gamma": 1.0, "q_lr": 1e-3, "policy_lr": 1e-2, "optimizer": "sgd", "fit_steps": 100000},
        "meta_test": {"iterations": 1, "inits": 1},
    },
    "point-mass": {
        "seeds": [0], "horizon": 10, "goals": [[1.0, 0.5]], "initial_states": [[0.0, 0.0], [0.5, -0.5]],
        "policy": {"kind": "constant", "init_range": [-2.0, 2.0]},
        "critic": {"kind": "quadratic-form", "goal_mode": "relative", "rank": 4},
        "inner": {"alpha": 0.1},
        "outer": {"iterations": 2000, "lr": 1e-2},
        "baseline": {"critic": {"kind": "quadratic-form", "goal_mode": "relative", "rank": 4},
                     "gamma": 0.9, "q_lr": 1e-2, "fit_steps": 3000},
        "meta_test": {"iterations": 1, "inits": 4},
        "landscape": {"eval_goals": [[-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [0.0, 0.0], [1.5, 1.5],
                                     [-1.5, 0.0], [0.5, 1.5]]},
    },
    "reacher2": {
        "seeds": [0, 1, 2, 3, 4], "horizon": 100,
        "goals": [[0.6, 0.4], [-0.6, 0.4], [0.6, -0.4], [-0.6, -0.4]],
        "initial_states": [[0.0, 0.0, 0.0, 0.0]],
        "policy": {"kind": "mlp", "hidden": [64, 64], "activation": "tanh", "out_init": 3e-3},
        "critic": {"kind": "mlp", "hidden": [128, 128], "activation": "elu", "goal_mode": "concat"},
        "inner": {"alpha": 1e-2, "steps": 1},
        "outer": {"iterations": 400, "lr": 1e-3},
        "baseline": {"critic": {"kind": "mlp", "hidden": [128, 128], "goal_mode": "relative"},
                     "iterations": 400, "gamma": 0.99, "noise_std": 0.1},
        "meta_test": {"iterations": 1, "inits": 5},
        "sweeps": [
            {"kind": "goals", "values": [round(0.1 * i, 1) for i in range(1, 11)]},
            {"kind": "mass", "values": [0.5, 0.75, 1.0, 1.5, 2.0]},
            {"kind": "length", "values": [0.25, 0.5, 0.75, 1.0]},
        ],
    },
}


def _merge(base: dict, over: dict, cls, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(over) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    out = copy.deepcopy(base)
    for k, v in over.items():
        sub = _SECTIONS.get(k) if cls is ExperimentConfig else None
        if sub is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.{k}: expected an object")
            out[k] = _merge(out.get(k, {}), v, sub, f"{where}.{k}")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _tuples(cls, d: dict) -> dict:
    d = dict(d)
    for f in fields(cls):
        if f.name in d and isinstance(d[f.name], list) and f.default is not None \
                and isinstance(f.default, tuple):
            d[f.name] = tuple(d[f.name])
    return d


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config: environment defaults first, then the user's keys; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    env = data.get("environment", "reacher2")
    if env not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {env!r}")
    merged = _merge(ENV_DEFAULTS[env], data, ExperimentConfig, "config")
    merged["environment"] = env
    kw = {}
    try:
        for k, v in merged.items():
            if k in _SECTIONS:
                kw[k] = _SECTIONS[k](**_tuples(_SECTIONS[k], v))
            elif k == "sweeps":
                sweeps = []
                for i, s in enumerate(v):
                    _merge({}, s, SweepSpec, f"config.sweeps[{i}]")
                    sweeps.append(SweepSpec(**s))
                kw[k] = sweeps
            else:
                kw[k] = v
        _merge({}, merged.get("baseline", {}).get("critic", {}), CriticSpec, "config.baseline.critic")
        return ExperimentConfig(**kw)
    except TypeError as e:  # wrong value types inside a section
        raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(data)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# builders


def build_model(cfg: ExperimentConfig, mass: float = 1.0, lengths=None, action_scale=None):
    d = cfg.dynamics
    if cfg.environment == "toy":
        return ScalarIntegrator() if d.dt is None else ScalarIntegrator(d.dt)
    if cfg.environment == "point-mass":
        scale = d.action_scale if action_scale is None else action_scale
        return PointMass2D(0.1 if d.dt is None else d.dt, scale)
    p = ArmParams(d.m1, d.m2, d.l1, d.l2, d.friction, d.torque_limit, d.gravity)
    p = p.scaled(mass, None if lengths is None else tuple(lengths))
    return TwoLinkArm(p, 0.01 if d.dt is None else d.dt)


def _dims(cfg: ExperimentConfig):
    m = build_model(cfg)
    return m.state_dim, m.action_dim, len(cfg.goals[0])


def build_policy(cfg: ExperimentConfig):
    sd, ad, _ = _dims(cfg)
    p = cfg.policy
    if p.kind == "constant":
        return ConstantPolicy(ad, *p.init_range)
    if p.kind == "mlp":
        return MlpPolicy(MlpConfig(sd, tuple(p.hidden), ad, p.activation, out_init=p.out_init))
    raise ConfigError(f"unknown policy kind {p.kind!r}")


def build_critic(cfg: ExperimentConfig, spec: CriticSpec | None = None, seed: int = 0):
    spec = spec or cfg.critic
    sd, ad, gd = _dims(cfg)
    if spec.kind == "toy":
        return QuadraticCritic()
    if spec.kind == "quadratic-form":
        in_dim = sd + ad + (gd if spec.goal_mode == "concat" else 0)
        return QuadraticFormCritic(in_dim, spec.rank, spec.goal_mode)
    if spec.kind == "mlp":
        mc = critic_config(sd, ad, gd, tuple(spec.hidden), spec.activation, spec.goal_mode, seed)
        return MlpCritic(mc, spec.goal_mode)
    raise ConfigError(f"unknown critic kind {spec.kind!r}")


def baseline_critic_spec(cfg: ExperimentConfig) -> CriticSpec:
    return replace(cfg.critic, **cfg.baseline.critic)


def q_learning_config(cfg: ExperimentConfig, seed: int) -> QLearningConfig:
    b = cfg.baseline
    return QLearningConfig(gamma=b.gamma, q_lr=b.q_lr, policy_lr=b.policy_lr, batch_size=b.batch_size,
                           epochs=b.epochs, policy_steps=b.policy_steps, optimizer=b.optimizer,
                           iterations=b.iterations, noise_std=b.noise_std, seed=seed)


def training_tasks(cfg: ExperimentConfig) -> list[Task]:
    return make_tasks(cfg.goals, cfg.initial_states)


# ---------------------------------------------------------------------------
# training drivers


@dataclass
class TrainResult:
    method: str
    seed: int
    params: np.ndarray
    record: MetaTrainRecord
    critic: object

    @property
    def diverged(self) -> bool:
        return self.record.diverged


def train_meta(cfg: ExperimentConfig, seed: int) -> TrainResult:
    critic = build_critic(cfg, seed=seed)
    outer = replace(cfg.outer, seed=seed)
    phi, rec = meta_train(outer, cfg.inner, build_model(cfg), training_tasks(cfg), policy=build_policy(cfg),
                          critic=critic, horizon=cfg.horizon, phi0=critic.init(seed))
    return TrainResult("meta", seed, phi, rec, critic)


def _random_constant_dataset(cfg: ExperimentConfig, seed: int) -> ReplayDataset:
    """Rollouts of random constant-action policies from every training start and goal."""
    model = build_model(cfg)
    tasks = training_tasks(cfg)
    s0 = np.stack([t.s0 for t in tasks])
    goals = np.stack([t.goal for t in tasks])
    lo, hi = cfg.policy.init_range
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    data = ReplayDataset()
    for _ in range(cfg.baseline.dataset_rollouts):
        th = rng.uniform(lo, hi, size=(len(tasks), model.action_dim))
        tr = rollout(lambda s: th, model, s0, TaskSpec(np.zeros(goals.shape[1]), cfg.horizon))
        costs = np.asarray(tr.costs).copy()
        costs[-1] = np.sum((tr.states[-1][:, :goals.shape[1]] - goals) ** 2, axis=-1)
        data.add_rollout(tr.states, tr.actions, costs, goals)
    return data


def train_supervised(cfg: ExperimentConfig, seed: int) -> TrainResult:
    """Supervised Q: DDPG-style loop for MLP policies, a fit on random rollouts otherwise."""
    q = build_critic(cfg, baseline_critic_spec(cfg), seed=seed)
    qcfg = q_learning_config(cfg, seed)
    if cfg.policy.kind == "mlp":
        res = ddpg_train(build_model(cfg), training_tasks(cfg), qcfg, q=q, policy=build_policy(cfg),
                         horizon=cfg.horizon, q_params=q.init(seed))
        return TrainResult("supervised", seed, res.q_params, res.record, q)
    data = _random_constant_dataset(cfg, seed)
    rec = MetaTrainRecord()
    trace: list = []
    try:
        params = fit_q(data, qcfg, q, q.init(seed), steps=cfg.baseline.fit_steps,
                       rng=np.random.default_rng(np.random.SeedSequence([seed, 5])), trace=trace)
    except FitDiverged:
        params, rec.diverged = q.init(seed), True
    rec.rows = [(i, 0, 0, v) for i, v in enumerate(trace)]
    return TrainResult("supervised", seed, params, rec, q)


TRAINERS: dict[str, Callable] = {"meta": train_meta, "supervised": train_supervised}


def checkpoint_path(out: Path, method: str, seed: int) -> Path:
    return Path(out) / "meta-train" / f"seed{seed}" / ("critic.ckpt" if method == "meta" else "qsup.ckpt")


def save_result(cfg: ExperimentConfig, res: TrainResult, out: Path) -> list[Path]:
    ck = checkpoint_path(out, res.method, res.seed)
    mc = res.critic.config if isinstance(res.critic, MlpCritic) else None
    spec = cfg.critic if res.method == "meta" else baseline_critic_spec(cfg)
    meta = {"method": res.method, "environment": cfg.environment, "critic": _plain(asdict(spec)),
            "diverged": res.diverged, "config_sha256": config_hash(cfg)}
    paths = [save_checkpoint(ck, res.params, mc, res.seed, meta)]
    stem = "curve" if res.method == "meta" else "qsup_curve"
    paths.append(res.record.to_csv(ck.parent / f"{stem}.csv"))
    if res.method == "meta" and res.record.theta_trace:
        paths.append(res.record.theta_trace_csv(ck.parent / "theta_trace.csv"))
    return paths


def load_critic(cfg: ExperimentConfig, path):
    params, header = load_checkpoint(path)
    spec = CriticSpec(**_tuples(CriticSpec, header["meta"]["critic"]))
    critic = build_critic(cfg, spec, seed=header.get("seed") or 0)
    if critic.n_params != params.size:
        raise ConfigError(f"{path}: checkpoint does not match the configured critic")
    return critic, params, header["meta"].get("method", "meta")


def _train_job(args):
    cfg, method, seed = args
    return TRAINERS[method](cfg, seed)


def pmap(fn, items, threads: int = 1) -> list:
    """Ordered map, optionally over worker processes; results do not depend on ``threads``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def ensure_trained(cfg: ExperimentConfig, out: Path, methods=None, threads: int = 1, retrain=False):
    """Load existing checkpoints under ``out`` or train (and save) the missing ones."""
    methods = list(methods or cfg.methods)
    jobs = [(cfg, m, s) for m in methods for s in cfg.seeds
            if retrain or not checkpoint_path(out, m, s).exists()]
    for res in pmap(_train_job, jobs, threads):
        save_result(cfg, res, out)
    loaded = {}
    for m in methods:
        for s in cfg.seeds:
            critic, params, _ = load_critic(cfg, checkpoint_path(out, m, s))
            loaded[m, s] = (critic, params)
    return loaded


# ---------------------------------------------------------------------------
# evaluation


def test_settings(cfg: ExperimentConfig, method: str) -> tuple[InnerLoopConfig, int]:
    mt = cfg.meta_test
    if method == "meta":
        alpha = cfg.inner.alpha if mt.alpha is None else mt.alpha
        return InnerLoopConfig(alpha), mt.iterations
    b = cfg.baseline
    alpha = b.policy_lr if b.test_alpha is None else b.test_alpha
    return InnerLoopConfig(alpha), mt.iterations if b.test_iterations is None else b.test_iterations


def evaluate(cfg: ExperimentConfig, method: str, critic, params, seed: int, goals, env,
             inits: int, s0=None) -> np.ndarray:
    """Final terminal errors, shape ``(len(goals), inits)``, of fresh policies trained with a frozen critic."""
    goals = np.atleast_2d(np.asarray(goals, dtype=np.float64))
    s0 = np.asarray(cfg.initial_states[0] if s0 is None else s0, dtype=np.float64)
    tasks = [Task(g, s0, gi, k) for gi, g in enumerate(goals) for k in range(inits)]
    inner, iters = test_settings(cfg, method)
    res = meta_test(critic, params, tasks, env, inner, iters, policy=build_policy(cfg), horizon=cfg.horizon,
                    seed=seed, max_grad_norm=cfg.meta_test.max_grad_norm)
    return res.final_cost.reshape(len(goals), inits)


def sweep_goals(cfg: ExperimentConfig, sweep: SweepSpec, seed: int, column: int, value: float) -> np.ndarray:
    """Goals for one sweep cell; goal sweeps perturb the chosen training goals with N(0, std^2)."""
    base = np.asarray(cfg.goals, dtype=np.float64)
    if sweep.kind != "goals":
        return base[np.arange(sweep.goals_per_cell) % len(base)]
    anchors = base[np.asarray(sweep.base_goals)]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17, column]))
    idx = np.arange(sweep.goals_per_cell) % len(anchors)
    return anchors[idx] + value * rng.standard_normal((sweep.goals_per_cell, base.shape[1]))


def sweep_env(cfg: ExperimentConfig, sweep: SweepSpec, value: float):
    if sweep.kind == "mass":
        return build_model(cfg, mass=value)
    if sweep.kind == "length":
        return build_model(cfg, lengths=(value, value))
    return build_model(cfg)


def _sweep_job(args):
    cfg, sweep, method, seed, column, critic, params = args
    value = sweep.values[column]
    goals = sweep_goals(cfg, sweep, seed, column, value)
    try:
        errs = evaluate(cfg, method, critic, params, seed, goals, sweep_env(cfg, sweep, value),
                        sweep.policies_per_cell)
    except FloatingPointError:
        errs = np.full((len(goals), sweep.policies_per_cell), np.inf)
    return method, seed, column, errs


def run_sweep(cfg: ExperimentConfig, sweep: SweepSpec, critics: dict, threads: int = 1) -> list[tuple]:
    """Rows ``(method, seed, value, goal_id, init_id, final_error)``."""
    jobs = [(cfg, sweep, m, s, c, *critics[m, s]) for m in cfg.methods for s in cfg.seeds
            for c in range(len(sweep.values))]
    rows = []
    for method, seed, column, errs in pmap(_sweep_job, jobs, threads):
        for gi in range(errs.shape[0]):
            for k in range(errs.shape[1]):
                rows.append((method, seed, sweep.values[column], gi, k, float(errs[gi, k])))
    return rows


def fmt_cell(values) -> str:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return "n/a"
    return f"{np.mean(v):.3g}({np.std(v):.2g})"


def sweep_table(rows, methods, values, seeds=None) -> list[list[str]]:
    """Rows = methods, columns = sweep values, cells = ``mean(std)`` of the final errors."""
    table = [["method"] + [str(v) for v in values]]
    for m in methods:
        line = [METHOD_LABELS[m]]
        for v in values:
            line.append(fmt_cell([r[5] for r in rows if r[0] == m and r[2] == v
                                  and (seeds is None or r[1] in seeds.get(m, ()))]))
        table.append(line)
    return table


def column_medians(rows, method, values) -> list[float]:
    return [float(np.median([r[5] for r in rows if r[0] == method and r[2] == v])) for v in values]


def solved_seeds(cfg: ExperimentConfig, out: Path) -> dict[str, list[int]]:
    """Seeds whose training curve ever reached ``solved_threshold`` (median over tasks)."""
    solved = {}
    for m in cfg.methods:
        solved[m] = []
        for s in cfg.seeds:
            stem = "curve" if m == "meta" else "qsup_curve"
            path = checkpoint_path(out, m, s).parent / f"{stem}.csv"
            if path.exists() and _curve_min(path) < cfg.solved_threshold:
                solved[m].append(s)
    return solved


def _curve_min(path) -> float:
    by_it: dict[int, list[float]] = {}
    with open(path) as f:
        for row in csv.DictReader(f):
            by_it.setdefault(int(row["iteration"]), []).append(float(row["task_loss"]))
    return min((float(np.median(v)) for v in by_it.values()), default=np.inf)


def first_below(curve, threshold: float) -> int | None:
    """First iteration at which ``curve`` drops below ``threshold`` (None if never)."""
    hits = np.flatnonzero(np.asarray(curve) < threshold)
    return int(hits[0]) if hits.size else None


# ---------------------------------------------------------------------------
# toy-problem pipelines


def toy_meta_pipeline(s0: float = -6.0, g: float = 0.0, cfg: ExperimentConfig | None = None) -> float:
    """Meta-train the scalar critic jointly with a carried policy, then meta-test from that policy."""
    cfg = cfg or config_from_dict({"environment": "toy", "goals": [[g]], "initial_states": [[s0]]})
    critic, policy = QuadraticCritic(), ConstantPolicy(1, 0.0, 0.0)
    model = build_model(cfg)
    tasks = training_tasks(cfg)
    phi, rec = meta_train(cfg.outer, cfg.inner, model, tasks, policy=policy, critic=critic,
                          horizon=cfg.horizon, phi0=critic.init(), theta0=np.zeros((len(tasks), 1)))
    res = meta_test(critic, phi, tasks, model, cfg.inner, cfg.meta_test.iterations, policy=policy,
                    horizon=cfg.horizon, theta0=rec.final_theta)
    return float(res.theta[0, 0])


def toy_supq_pipeline(s0: float = -6.0, s1: float = -2.0, g: float = 0.0, theta0: float = 0.0,
                      policy_steps: int = 20000) -> tuple[float, float]:
    """Fit the scalar Q on one rollout with action ``s1 - s0``, then descend on it; returns (phi1, theta)."""
    a = s1 - s0
    states = np.array([[s0], [s1], [s1 + a]])
    actions = np.array([[a], [a]])
    costs = np.array([0.0, 0.0, (s1 + a - g) ** 2])
    data = ReplayDataset()
    data.add_rollout(states, actions, costs, np.array([g]))
    cfg = QLearningConfig(gamma=1.0, q_lr=1e-3, policy_lr=1e-2, optimizer="sgd", grad_tol=1e-13)
    q = QuadraticCritic()
    phi = fit_q(data, cfg, q, q.init(), full_batch=True, steps=100000)
    theta = policy_from_q(q, phi, np.array([theta0]), cfg, np.array([[s0], [s1]]),
                          policy=ConstantPolicy(1), steps=policy_steps)
    return float(phi[0]), float(theta[0])


@dataclass
class Check:
    name: str
    value: float
    expected: float
    tol: float

    @property
    def error(self) -> float:
        return abs(self.value - self.expected)

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.value) and self.error <= self.tol)

    def line(self) -> str:
        tag = "PASS" if self.ok else "FAIL"
        return f"{tag} {self.name}: got {self.value:.10g}, expected {self.expected:.10g}, error {self.error:.2e}"


def toy_checks(mutate: bool = False, n_random: int = 100, seed: int = 0) -> list[Check]:
    """Every scalar-toy comparison between learning loops and closed forms.

    ``mutate`` perturbs the closed-form meta optimum, which must make the
    oracle comparison fail (fault injection for the checker itself).
    """
    meta_phi = toy.meta_optimal_phi
    if mutate:
        def meta_phi(s0, s1, theta, g):
            return toy.meta_optimal_phi(s0, s1, theta, g) * 1.01 + 1e-3
    s0, g = -6.0, 0.0
    checks = [Check("meta-critic policy, s0=-6, g=0", toy_meta_pipeline(s0, g), toy.optimal_policy(s0, g), 1e-4)]
    phi1, th = toy_supq_pipeline(-6.0, -2.0, g)
    checks.append(Check("supervised-Q policy, s0=-6, s1=-2", th, toy.supq_policy_fixed_point(-6.0, -2.0), 1e-6))
    checks.append(Check("supervised-Q phi1 vs closed form", phi1, toy.supq_optimal_phi(-6.0, -2.0, 4.0, 4.0), 1e-6))
    checks.append(Check("two-critic fixed point, s0=-6, s1=-2, a=4",
                        toy.metacritic_scalar_fixed_point(-6.0, -2.0, 4.0), 0.5, 1e-12))
    s0_, th_, g_ = random_toy_instances(n_random, seed)
    s1_ = s0_ + th_
    closed = np.array([meta_phi(*args) for args in zip(s0_, s1_, th_, g_)])
    roots = np.array([toy.meta_phi_by_root(*args) for args in zip(s0_, s1_, th_, g_)])
    worst_meta = float(np.max(np.abs(converge_meta_phi(s0_, th_, g_) - closed)))
    worst_root = float(np.max(np.abs(roots - closed)))
    q0, qa, qg = random_supq_instances(n_random, seed)
    r2 = (q0 + 2 * qa - qg) ** 2
    supq_closed = np.array([toy.supq_optimal_phi(x, x + y, y, r) for x, y, r in zip(q0, qa, r2)])
    supq_scan = np.array([toy.supq_phi_by_scan(x, x + y, y, r) for x, y, r in zip(q0, qa, r2)])
    worst_supq = float(np.max(np.abs(converge_supq_phi(q0, qa, qg) - supq_closed)))
    in_range = np.abs(supq_closed) < 20
    worst_scan = float(np.max(np.abs(supq_scan - supq_closed)[in_range]))
    checks.append(Check("engine phi1 vs meta closed form (worst of random)", worst_meta, 0.0, 1e-6))
    checks.append(Check("root-finder phi1 vs meta closed form (worst of random)", worst_root, 0.0, 1e-6))
    checks.append(Check("engine phi1 vs supervised-Q closed form (worst of random)", worst_supq, 0.0, 1e-6))
    checks.append(Check("grid scan phi1 vs supervised-Q closed form (worst of random)", worst_scan, 0.0, 1e-4))
    return checks


def random_toy_instances(n: int, seed: int = 0, min_c: float = 0.5):
    """``(s0, theta, g)`` arrays drawn from U(-3, 3), keeping ``|s0 + s1 + 2 theta| >= min_c``.

    Instances with a near-zero ``s0 + s1 + 2 theta`` have an almost flat task
    loss in ``phi1`` (and no optimum at zero); they are redrawn.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        s0, th, g = rng.uniform(-3, 3, 3)
        if abs(2 * s0 + 3 * th) >= min_c:
            out.append((s0, th, g))
    return tuple(np.array(c) for c in zip(*out))


def converge_meta_phi(s0, theta, g, lr: float = 1e-3, max_steps: int = 100000, tol: float = 1e-12):
    """Plain gradient descent on the toy task loss through the engine, from phi1 = 0.

    Accepts scalars or equal-length arrays; every instance gets its own critic
    (one row of a ``(B, 1)`` phi), so a whole batch converges in one loop.
    Returns an array (or a float for scalar input).
    """
    scalar = np.ndim(s0) == 0
    s0, theta, g = (np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in (s0, theta, g))
    B = len(s0)
    critic, policy, model = QuadraticCritic(), ConstantPolicy(1), ScalarIntegrator()
    phi = dc.inp("phi", (B, 1))
    th = dc.inp("theta", (B, 1))
    states = dc.inp("states", (B, 2, 1))
    goal = dc.inp("goal", (B, 1))
    th_new = inner_update(th, critic, phi, policy, states, goal, InnerLoopConfig(0.5))
    loss = outer_task_loss(th_new, policy, model, dc.inp("s0", (B, 1)), goal, 2)
    (gphi,) = dc.grad(loss, [phi])
    prog = dc.Program([gphi])
    bind = {"theta": theta[:, None], "goal": g[:, None], "s0": s0[:, None],
            "states": np.stack([s0, s0 + theta], axis=1)[:, :, None]}
    p = np.zeros((B, 1))
    for _ in range(max_steps):
        (grad,) = prog({**bind, "phi": p})
        if np.max(np.abs(grad)) < tol:
            break
        p = p - lr * grad
    return float(p[0, 0]) if scalar else p[:, 0]


def random_supq_instances(n: int, seed: int = 0, curvature=(5.0, 1500.0)):
    """``(s0, a, g)`` arrays from U(-1.5, 1.5) whose TD objective has curvature in ``curvature``.

    The bounds keep plain gradient descent at rate 1e-3 both stable and
    convergent within 1e5 steps.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
    out = []
    while len(out) < n:
        s0, a, g = rng.uniform(-1.5, 1.5, 3)
        A, B = (s0 + a) ** 2, (s0 + 2 * a) ** 2
        if curvature[0] <= 2 * ((A - B) ** 2 + B**2) <= curvature[1]:
            out.append((s0, a, g))
    return tuple(np.array(c) for c in zip(*out))


def converge_supq_phi(s0, a, g, lr: float = 1e-3, max_steps: int = 100000, tol: float = 1e-12) -> np.ndarray:
    """Plain gradient descent on the TD loss of one constant-action rollout per instance, from phi1 = 0."""
    s0, a, g = (np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in (s0, a, g))
    B = len(s0)
    states = np.stack([s0, s0 + a, s0 + 2 * a])[:, :, None]
    costs = np.stack([np.zeros(B), np.zeros(B), (s0 + 2 * a - g) ** 2])
    data = ReplayDataset()
    data.add_rollout(states, np.stack([a, a])[:, :, None], costs, g[:, None])
    # rows are time-major; (2, B) leading axes line up with a (1, B) row of critics
    batch = {k: dc.const(v.reshape((2, B) + v.shape[1:])) for k, v in data.batch().items()}
    phi = dc.inp("phi", (1, B))
    (gphi,) = dc.grad(q_td_loss(QuadraticCritic(), phi, batch, 1.0), [phi])
    prog = dc.Program([gphi])
    p = np.zeros((1, B))
    for _ in range(max_steps):
        (grad,) = prog({"phi": p})
        if np.max(np.abs(grad)) < tol:
            break
        p = p - lr * grad
    return p[0]


# ---------------------------------------------------------------------------
# commands


def write_csv(path, rows, header=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if header:
            w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return path


def write_manifest(out: Path, command: str, cfg: ExperimentConfig | None, outputs) -> Path:
    man = {
        "command": command,
        "config": None if cfg is None else cfg.to_dict(),
        "config_sha256": None if cfg is None else config_hash(cfg),
        "versions": {"mbcritic": VERSION, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
    }
    path = Path(out) / f"manifest-{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def cmd_toy_verify(args) -> int:
    checks = toy_checks(mutate=args.mutate, seed=args.seed or 0)
    for c in checks:
        print(c.line())
    ok = all(c.ok for c in checks)
    print("toy-verify:", "all checks passed" if ok else "FAILED")
    if args.out:
        out = Path(args.out)
        p = write_csv(out / "toy_verify.csv", [(c.name, float(c.value), float(c.expected), float(c.error),
                                                 int(c.ok)) for c in checks],
                      ["check", "value", "expected", "error", "ok"])
        write_manifest(out, "toy-verify", None, [p])
    return 0 if ok else 1


def cmd_meta_train(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    jobs = [(cfg, m, s) for m in cfg.methods for s in cfg.seeds]
    outputs = []
    for res in pmap(_train_job, jobs, threads):
        outputs += save_result(cfg, res, out)
        curve = res.record.curve()
        last = float(curve[-1]) if curve.size else float("nan")
        print(f"{res.method} seed {res.seed}: {len(curve)} iterations, last median loss {last:.4g}"
              + (" (diverged)" if res.diverged else ""))
    write_manifest(out, "meta-train", cfg, outputs)
    return 0


def cmd_meta_test(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    mt = cfg.meta_test
    goals = cfg.goals if mt.goals is None else mt.goals
    env = build_model(cfg, mt.mass, mt.lengths, mt.action_scale)
    rows = []
    for m in cfg.methods:
        for s in cfg.seeds:
            path = checkpoint_path(out, m, s)
            if not path.exists():
                raise FileNotFoundError(f"missing checkpoint {path}; run meta-train first")
            critic, params, _ = load_critic(cfg, path)
            errs = evaluate(cfg, m, critic, params, s, goals, env, mt.inits)
            for gi in range(errs.shape[0]):
                for k in range(errs.shape[1]):
                    rows.append((m, s, gi, k, float(errs[gi, k])))
    p = write_csv(out / "meta-test" / "results.csv", rows, ["method", "seed", "goal_id", "init_id", "final_error"])
    for m in cfg.methods:
        v = [r[4] for r in rows if r[0] == m]
        print(f"{METHOD_LABELS[m]}: median final error {np.median(v):.4g}, {fmt_cell(v)}")
    write_manifest(out, "meta-test", cfg, [p])
    return 0


@dataclass
class LandscapeReport:
    rows: list  # (goal_id, g1, g2, kind, i, j, cells_from_true)
    paths: list

    def within_one(self, kind: str) -> list[bool]:
        return [r[6] <= 1 for r in self.rows if r[3] == kind]


def run_landscape(cfg: ExperimentConfig, out: Path | None, seed: int) -> LandscapeReport:
    if cfg.environment != "point-mass":
        raise ConfigError("landscapes are defined for the point-mass environment")
    meta = train_meta(cfg, seed)
    sup = train_supervised(cfg, seed)
    ls = cfg.landscape
    s0 = cfg.initial_states[0] if ls.s0 is None else ls.s0
    goals = [list(g) for g in cfg.goals] + [list(g) for g in ls.eval_goals]
    model = build_model(cfg)
    rows, paths = [], []
    for gi, g in enumerate(goals):
        spec = GridSpec(tuple(ls.theta1), tuple(ls.theta2), (ls.resolution, ls.resolution), tuple(g),
                        tuple(s0), cfg.horizon)
        grids = {"true-return": landscape_grid("true-return", spec, model=model),
                 "meta": landscape_grid("meta", spec, meta.params, critic=meta.critic, model=model),
                 "supervised": landscape_grid("supervised", spec, sup.params, critic=sup.critic, model=model)}
        ref = grids["true-return"].argmin()
        for kind, grid in grids.items():
            ij = grid.argmin()
            rows.append((gi, float(g[0]), float(g[1]), kind, ij[0], ij[1], cell_distance(ij, ref)))
            if out is not None:
                paths.append(grid.to_csv(Path(out) / "landscape" / f"{kind}_goal{gi}.csv"))
    if out is not None:
        paths.append(write_csv(Path(out) / "landscape" / "summary.csv", rows,
                               ["goal_id", "goal1", "goal2", "kind", "argmin_i", "argmin_j", "cells_from_true"]))
    return LandscapeReport(rows, paths)


def cmd_landscape(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    rep = run_landscape(cfg, out, cfg.seeds[0])
    for kind in ("meta", "supervised"):
        hits = rep.within_one(kind)
        print(f"{kind}: argmin within one cell of the true return for {sum(hits)}/{len(hits)} goals")
    write_manifest(out, "landscape", cfg, rep.paths)
    return 0


def cmd_sweep(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    if not cfg.sweeps:
        raise ConfigError("config has no sweeps")
    critics = ensure_trained(cfg, out, threads=threads)
    solved = solved_seeds(cfg, out)
    outputs = []
    for sweep in cfg.sweeps:
        rows = run_sweep(cfg, sweep, critics, threads)
        d = out / "sweep"
        outputs.append(write_csv(d / f"{sweep.kind}_runs.csv", rows,
                                 ["method", "seed", "value", "goal_id", "init_id", "final_error"]))
        table = sweep_table(rows, cfg.methods, sweep.values)
        outputs.append(write_csv(d / f"{sweep.kind}_table.csv", table))
        outputs.append(write_csv(d / f"{sweep.kind}_table_solved_seeds.csv",
                                 sweep_table(rows, cfg.methods, sweep.values, seeds=solved)))
        print(f"[{sweep.kind}] all seeds")
        for line in table:
            print("  " + "  ".join(line))
    outputs.append(write_csv(out / "sweep" / "solved_seeds.csv",
                             [(m, " ".join(str(s) for s in solved[m])) for m in cfg.methods],
                             ["method", "solved_seeds"]))
    write_manifest(out, "sweep", cfg, outputs)
    return 0


COMMANDS = {"meta-train": cmd_meta_train, "meta-test": cmd_meta_test, "landscape": cmd_landscape,
            "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mbcritic", description="Meta-learned critics: experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("toy-verify", *COMMANDS):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "toy-verify":
            p.add_argument("--mutate", action="store_true", help="inject a fault into an oracle; must fail")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "toy-verify":
            return cmd_toy_verify(args)
        cfg = load_config(args.config) if args.config else config_from_dict({})
        if args.seed is not None:
            cfg = replace(cfg, seeds=[args.seed])
        out = Path(args.out) if args.out else Path(cfg.out)
        return COMMANDS[args.command](cfg, out, max(1, args.threads))
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Small MLPs for the policy and the goal-conditioned critic.

Parameters are flat fp64 vectors.  Each layer stores a weight block of shape
``(in, out)`` in row-major order followed by a bias of length ``out``.  A
leading batch axis on the parameters (``(B, P)``) evaluates ``B`` independent
networks at once; the input then needs a matching leading axis.

Forward functions accept plain arrays or :mod:`mbcritic.diffcore` expressions.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

ACTIVATIONS = {"tanh": dc.tanh, "elu": dc.elu, "relu": dc.relu}


@dataclass(frozen=True)
class MlpConfig:
    in_dim: int
    hidden: tuple[int, ...] = ()
    out_dim: int = 1
    activation: str = "tanh"
    seed: int = 0
    out_init: float | None = None  # final-layer weight bound; None -> fan-in rule

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.out_init is not None and not self.out_init >= 0:
            raise ValueError("out_init must be >= 0")
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"layer widths must be >= 1: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.out_dim]

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum((a + 1) * b for a, b in zip(w[:-1], w[1:]))

    def layer_slices(self):
        """Yield ``(w_slice, b_slice, fan_in, fan_out)`` per layer."""
        off = 0
        w = self.widths
        for a, b in zip(w[:-1], w[1:]):
            ws = slice(off, off + a * b)
            off += a * b
            bs = slice(off, off + b)
            off += b
            yield ws, bs, a, b


def init_params(config: MlpConfig, seed: int | None = None) -> np.ndarray:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.

    ``config.out_init`` replaces the bound of the last layer (small output
    layers keep freshly initialised policies close to zero torque).
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    flat = np.zeros(config.n_params)
    n_layers = len(config.widths) - 1
    for i, (ws, _bs, fan_in, _fan_out) in enumerate(config.layer_slices()):
        bound = 1.0 / np.sqrt(fan_in)
        if i == n_layers - 1 and config.out_init is not None:
            bound = config.out_init
        flat[ws] = rng.uniform(-bound, bound, size=ws.stop - ws.start)
    return flat


def unflatten(config: MlpConfig, flat):
    """Split a flat vector (or a ``(B, P)`` batch of them) into ``(W, b)`` pairs."""
    if flat.shape[-1] != config.n_params:
        raise ValueError(f"expected {config.n_params} parameters, got {flat.shape[-1]}")
    lead = tuple(flat.shape[:-1])
    layers = []
    for ws, bs, a, b in config.layer_slices():
        W = dc.reshape(flat[..., ws], lead + (a, b))
        bias = flat[..., bs]
        if lead:
            bias = dc.reshape(bias, lead + (1, b))
        layers.append((W, bias))
    return layers


def flatten(layers) -> np.ndarray:
    parts = []
    for W, b in layers:
        parts += [np.ravel(W), np.ravel(b)]
    return np.concatenate(parts)


def mlp_forward(config: MlpConfig, params, x):
    if x.shape[-1] != config.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != {config.in_dim}")
    batched = params.ndim > 1
    squeeze = False
    if batched and x.ndim == params.ndim:
        x = dc.reshape(x, tuple(x.shape[:-1]) + (1, x.shape[-1]))
        squeeze = True
    act = ACTIVATIONS[config.activation]
    layers = unflatten(config, params)
    h = x
    for i, (W, b) in enumerate(layers):
        h = dc.matmul(h, W) + b
        if i < len(layers) - 1:
            h = act(h)
    if squeeze:
        shape = tuple(h.shape)
        h = dc.reshape(h, shape[:-2] + (shape[-1],))
    return h


def policy_forward(config: MlpConfig, params, state):
    return mlp_forward(config, params, state)


def critic_input(state, action, goal, goal_mode: str = "concat"):
    """Assemble the critic input, broadcasting the goal over time steps."""
    gdim = goal.shape[-1]
    lead = tuple(state.shape[:-1])
    if tuple(goal.shape[:-1]) != lead:
        if len(goal.shape) == len(lead):
            # (B, g) goal against (B, T, s) states
            goal = dc.reshape(goal, tuple(goal.shape[:-1]) + (1, gdim))
        goal = dc.broadcast_to(goal, lead + (gdim,))
    if goal_mode == "concat":
        return dc.concat([state, action, goal], axis=-1)
    if goal_mode == "relative":
        rel = state[..., :gdim] - goal
        parts = [rel]
        if state.shape[-1] > gdim:
            parts.append(state[..., gdim:])
        parts.append(action)
        return dc.concat(parts, axis=-1)
    raise ValueError(f"unknown goal mode {goal_mode!r}")


def critic_forward(config: MlpConfig, params, state, action, goal, goal_mode: str = "concat"):
    """Per-step critic value; returns an array/expr shaped like ``state.shape[:-1]``."""
    x = critic_input(state, action, goal, goal_mode)
    out = mlp_forward(config, params, x)
    return out[..., 0]


# ---------------------------------------------------------------------------
# policy / critic objects used by the training loops


@dataclass(frozen=True)
class MlpPolicy:
    config: MlpConfig

    @property
    def n_params(self):
        return self.config.n_params

    def init(self, seed):
        return init_params(self.config, seed)

    def __call__(self, theta, state):
        return policy_forward(self.config, theta, state)


@dataclass(frozen=True)
class ConstantPolicy:
    """State-independent action ``a = theta`` (toy and point-mass landscapes)."""

    dim: int
    init_low: float = -1.0
    init_high: float = 1.0

    @property
    def n_params(self):
        return self.dim

    def init(self, seed):
        rng = np.random.default_rng(seed)
        return rng.uniform(self.init_low, self.init_high, size=self.dim)

    def __call__(self, theta, state):
        lead = tuple(state.shape[:-1])
        if theta.ndim > 1 and len(lead) == theta.ndim:
            theta = dc.reshape(theta, tuple(theta.shape[:-1]) + (1, self.dim))
        return dc.broadcast_to(theta, lead + (self.dim,))


@dataclass(frozen=True)
class MlpCritic:
    config: MlpConfig
    goal_mode: str = "concat"

    @property
    def n_params(self):
        return self.config.n_params

    def init(self, seed=None):
        return init_params(self.config, seed)

    def __call__(self, phi, state, action, goal):
        return critic_forward(self.config, phi, state, action, goal, self.goal_mode)


@dataclass(frozen=True)
class QuadraticCritic:
    """Toy critic ``(s + a)^2 * phi_1`` summed over state components."""

    init_value: float = 0.0
    n_params: int = field(default=1, init=False)

    def init(self, seed=None):
        return np.array([self.init_value])

    def __call__(self, phi, state, action, goal=None):
        # phi of shape (B, 1) gives every task row its own critic
        w = phi[0] if len(phi.shape) == 1 else phi
        return dc.sum_((state + action) ** 2, axis=-1) * w


@dataclass(frozen=True)
class QuadraticFormCritic:
    """``|A x|^2`` over the critic input ``x``; the multi-dimensional analogue of the toy critic.

    ``phi`` holds ``A`` (rank x in_dim, row-major).  There is no offset, so
    with relative goal inputs the critic is shift-equivariant in the goal.
    """

    in_dim: int
    rank: int = 4
    goal_mode: str = "relative"
    init_scale: float = 0.1

    @property
    def n_params(self):
        return self.in_dim * self.rank

    def init(self, seed=None):
        rng = np.random.default_rng(seed)
        return rng.uniform(-self.init_scale, self.init_scale, self.n_params)

    def __call__(self, phi, state, action, goal):
        x = critic_input(state, action, goal, self.goal_mode)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"critic input width {x.shape[-1]} != {self.in_dim}")
        A = dc.reshape(phi, (self.rank, self.in_dim))
        y = dc.matmul(x, A.T)
        return dc.sum_(y * y, axis=-1)


def critic_config(state_dim: int, action_dim: int, goal_dim: int, hidden=(400, 400),
                  activation: str = "elu", goal_mode: str = "concat", seed: int = 0) -> MlpConfig:
    if goal_mode == "concat":
        in_dim = state_dim + action_dim + goal_dim
    else:
        in_dim = state_dim + action_dim
    return MlpConfig(in_dim, tuple(hidden), 1, activation, seed)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (all little-endian):
#   8 bytes   magic b"MBCKPT01"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: {"config": {...}, "seed": int, "n_params": int, "meta": {...}}
#   8*P bytes float64 parameters

MAGIC = b"MBCKPT01"


def save_checkpoint(path, params: np.ndarray, config: MlpConfig | None = None,
                    seed: int | None = None, meta: dict | None = None) -> Path:
    params = np.ascontiguousarray(params, dtype="<f8").ravel()
    header = {
        "config": asdict(config) if config is not None else None,
        "seed": seed,
        "n_params": int(params.size),
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(params.tobytes())
    return path


def load_checkpoint(path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    params = np.frombuffer(data[12 + n:], dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise ValueError(f"{path}: truncated parameter block")
    if header.get("config"):
        header["config"] = MlpConfig(**header["config"])
    return params, header

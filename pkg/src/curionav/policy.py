"""Actor-critic network (conv laser trunk, optional LSTM) and action selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import MAX_RANGE, Action, GoalObservation

# Goal distances are scaled by the diagonal of the 5.33 m x 3.76 m floorplans.
GOAL_DISTANCE_SCALE = math.hypot(5.33, 3.76)


@dataclass(frozen=True)
class NetworkConfig:
    use_lstm: bool = True
    laser_dims: int = 72
    goal_dims: int = 3
    conv: tuple = ((8, 5, 2), (8, 3, 2))  # (filters, kernel, stride)
    fc: tuple = (64, 16)
    lstm_cells: int = 16
    action_count: int = 3

    def conv_lengths(self) -> list[int]:
        lengths = [self.laser_dims]
        for _, k, s in self.conv:
            lengths.append((lengths[-1] - k) // s + 1)
        return lengths

    @property
    def flat_dims(self) -> int:
        return self.conv[-1][0] * self.conv_lengths()[-1]

    @property
    def core_dims(self) -> int:
        return self.lstm_cells if self.use_lstm else self.fc[-1]


class ActorCriticOutput(NamedTuple):
    policy: Tensor          # (..., 3)
    log_policy: Tensor      # (..., 3)
    value: Tensor           # (...,)
    recurrent_state: tuple | None


def normalize_observation(ranges, goal: GoalObservation | np.ndarray):
    """Laser ranges scaled into [0, 1]; goal distance scaled by the floorplan diagonal."""
    laser = np.asarray(ranges, dtype=np.float64) / MAX_RANGE
    g = np.asarray(goal, dtype=np.float64)
    return laser, np.array([g[0] / GOAL_DISTANCE_SCALE, g[1], g[2]])


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_policy_params(cfg: NetworkConfig, rng: np.random.Generator, prefix: str = "ac.") -> dict[str, np.ndarray]:
    p = {}
    in_ch = 1
    for i, (filters, k, _) in enumerate(cfg.conv):
        p[f"{prefix}conv{i}.w"] = _uniform(rng, (filters, in_ch, k), in_ch * k)
        p[f"{prefix}conv{i}.b"] = np.zeros(filters)
        in_ch = filters
    width = cfg.flat_dims
    for i, units in enumerate(cfg.fc):
        p[f"{prefix}fc{i}.w"] = _uniform(rng, (units, width), width)
        p[f"{prefix}fc{i}.b"] = np.zeros(units)
        width = units
    core_in = width + cfg.goal_dims
    if cfg.use_lstm:
        H = cfg.lstm_cells
        p[f"{prefix}lstm.w"] = _uniform(rng, (4 * H, core_in + H), core_in + H)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget gate
        p[f"{prefix}lstm.b"] = b
    else:
        p[f"{prefix}core.w"] = _uniform(rng, (cfg.fc[-1], core_in), core_in)
        p[f"{prefix}core.b"] = np.zeros(cfg.fc[-1])
    head_in = cfg.core_dims + cfg.goal_dims
    p[f"{prefix}pi.w"] = _uniform(rng, (cfg.action_count, head_in), head_in)
    p[f"{prefix}pi.b"] = np.zeros(cfg.action_count)
    p[f"{prefix}v.w"] = _uniform(rng, (1, head_in), head_in)
    p[f"{prefix}v.b"] = np.zeros(1)
    return p


class ActorCritic:
    """Maps normalized (laser, goal) inputs to π(a|s) and V(s).

    ``params`` maps names to :class:`Tensor` (or arrays, wrapped without
    gradient tracking).  Inputs may carry a leading batch axis; with the LSTM
    variant a batch is interpreted as a time sequence by :meth:`forward_sequence`.
    """

    def __init__(self, cfg: NetworkConfig, params, prefix: str = "ac."):
        self.cfg = cfg
        self.prefix = prefix
        self.params = {k: ad.as_tensor(v) for k, v in params.items() if k.startswith(prefix)}
        expected = init_policy_params(cfg, np.random.default_rng(0), prefix)
        for name, arr in expected.items():
            if name not in self.params:
                raise ad.ShapeError(f"missing parameter {name!r}")
            if self.params[name].shape != arr.shape:
                raise ad.ShapeError(f"parameter {name!r} has shape {self.params[name].shape}, expected {arr.shape}")

    def _p(self, name) -> Tensor:
        return self.params[self.prefix + name]

    def initial_state(self):
        if not self.cfg.use_lstm:
            return None
        H = self.cfg.lstm_cells
        return (Tensor(np.zeros(H)), Tensor(np.zeros(H)))

    def embed(self, laser) -> Tensor:
        """Laser trunk: conv/ELU x2, flatten, FC/ELU x2.  laser: (72,) or (T, 72)."""
        x = ad.as_tensor(laser)
        batched = x.data.ndim == 2
        if x.shape[-1] != self.cfg.laser_dims:
            raise ad.ShapeError(f"laser input has {x.shape[-1]} entries, expected {self.cfg.laser_dims}")
        x = ad.reshape(x, (x.shape[0], 1, -1) if batched else (1, -1))
        for i, (_, _, stride) in enumerate(self.cfg.conv):
            x = ad.elu(ad.conv1d(x, self._p(f"conv{i}.w"), self._p(f"conv{i}.b"), stride=stride))
        x = ad.reshape(x, (x.shape[0], -1) if batched else (-1,))
        for i in range(len(self.cfg.fc)):
            x = ad.elu(ad.linear(x, self._p(f"fc{i}.w"), self._p(f"fc{i}.b")))
        return x

    def _heads(self, core: Tensor, goal: Tensor, state) -> ActorCriticOutput:
        h = ad.concat([core, goal])
        logits = ad.linear(h, self._p("pi.w"), self._p("pi.b"))
        log_pi = ad.log_softmax(logits)
        pi = ad.softmax(logits)
        value = ad.reshape(ad.linear(h, self._p("v.w"), self._p("v.b")), logits.shape[:-1])
        return ActorCriticOutput(pi, log_pi, value, state)

    def forward(self, laser, goal, state=None) -> ActorCriticOutput:
        """Single step (or an independent batch for the feed-forward variant)."""
        goal = ad.as_tensor(goal)
        if goal.shape[-1] != self.cfg.goal_dims:
            raise ad.ShapeError(f"goal input has {goal.shape[-1]} entries, expected {self.cfg.goal_dims}")
        emb = ad.concat([self.embed(laser), goal])
        if self.cfg.use_lstm:
            if state is None:
                raise ValueError("LSTM network requires a recurrent state")
            h, c = ad.lstm_cell(emb, state[0], state[1], self._p("lstm.w"), self._p("lstm.b"))
            return self._heads(h, goal, (h, c))
        core = ad.elu(ad.linear(emb, self._p("core.w"), self._p("core.b")))
        return self._heads(core, goal, None)

    def forward_sequence(self, lasers, goals, state=None) -> ActorCriticOutput:
        """Run T consecutive steps from ``state``; outputs are stacked along axis 0."""
        lasers, goals = ad.as_tensor(lasers), ad.as_tensor(goals)
        if not self.cfg.use_lstm:
            return self.forward(lasers, goals)
        emb = ad.concat([self.embed(lasers), goals])
        h, c = state if state is not None else self.initial_state()
        outs = []
        for t in range(emb.shape[0]):
            h, c = ad.lstm_cell(emb[t], h, c, self._p("lstm.w"), self._p("lstm.b"))
            outs.append(ad.reshape(h, (1, -1)))
        core = ad.concat(outs, axis=0)
        return self._heads(core, goals, (h, c))


def sample_action(policy, rng: np.random.Generator) -> Action:
    p = np.asarray(policy.data if isinstance(policy, Tensor) else policy, dtype=np.float64)
    idx = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    return Action(min(idx, len(p) - 1))


def greedy_action(policy) -> Action:
    p = np.asarray(policy.data if isinstance(policy, Tensor) else policy)
    return Action(int(np.argmax(p)))


def entropy(policy) -> float:
    p = np.asarray(policy.data if isinstance(policy, Tensor) else policy, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())

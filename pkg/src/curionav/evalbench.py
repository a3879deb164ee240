"""Fixed evaluation suites, success-ratio / episode-length statistics and
cross-configuration comparison tables."""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import (Action, EpisodeConfig, MapSpec, NavEnv, Pose, TerminalKind,
                       goal_observation, sample_episode)
from .policy import ActorCritic, NetworkConfig, greedy_action, normalize_observation, sample_action
from .rewards import RewardParams

SUITE_SIZE = 300
EVAL_MAX_STEPS = 400

RESULT_COLUMNS = ("map", "config", "episode", "outcome", "steps", "path_m")
SUMMARY_COLUMNS = ("map", "config", "episodes", "success_ratio", "steps_mean", "steps_std",
                   "success_steps_mean", "success_steps_std")


@dataclass(frozen=True)
class EpisodeSpec:
    start: Pose
    goal: tuple[float, float]


@dataclass(frozen=True)
class EvalSuite:
    map: MapSpec
    seed: int
    episodes: tuple[EpisodeSpec, ...]
    max_steps: int = EVAL_MAX_STEPS
    goal_radius: float = 0.1
    robot_radius: float = 0.1


def _map_key(m: MapSpec) -> int:
    return zlib.crc32(m.name.encode() + m.segments.tobytes())


def build_suite(m: MapSpec, seed: int, n_episodes: int = SUITE_SIZE, max_steps: int = EVAL_MAX_STEPS,
                goal_radius: float = 0.1, robot_radius: float = 0.1) -> EvalSuite:
    """Episode list that depends only on (map, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _map_key(m)]))
    cfg = EpisodeConfig(max_steps=max_steps, goal_radius=goal_radius, robot_radius=robot_radius)
    episodes = tuple(EpisodeSpec(*sample_episode(m, rng, cfg)) for _ in range(n_episodes))
    return EvalSuite(m, seed, episodes, max_steps, goal_radius, robot_radius)


@dataclass(frozen=True)
class EpisodeRecord:
    outcome: str
    steps: int
    path_m: float
    reward: float


@dataclass
class EvalResult:
    success_ratio: float
    steps_mean: float
    steps_std: float
    success_steps_mean: float
    success_steps_std: float
    avg_reward: float
    episodes: list[EpisodeRecord] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: list[EpisodeRecord]) -> "EvalResult":
        steps = np.array([r.steps for r in records], dtype=np.float64)
        ok = np.array([r.outcome == TerminalKind.REACHED_GOAL.value for r in records])
        succ = steps[ok]
        nan = float("nan")
        return cls(
            success_ratio=100.0 * ok.sum() / len(records) if records else 0.0,
            steps_mean=float(steps.mean()) if records else nan,
            steps_std=float(steps.std()) if records else nan,
            success_steps_mean=float(succ.mean()) if succ.size else nan,
            success_steps_std=float(succ.std()) if succ.size else nan,
            avg_reward=float(np.mean([r.reward for r in records])) if records else nan,
            episodes=list(records),
        )


class NetworkAgent:
    """Runs the actor-critic network as a policy; greedy by default."""

    def __init__(self, params, network: NetworkConfig | None = None, greedy: bool = True, seed: int = 0):
        arrays = params.arrays() if hasattr(params, "arrays") else params
        self.net = ActorCritic(network or NetworkConfig(), {k: np.array(v) for k, v in arrays.items()})
        self.greedy = greedy
        self.rng = np.random.default_rng(seed)
        self.state = None

    def reset(self):
        self.state = self.net.initial_state()

    def act(self, observation, env: NavEnv) -> Action:
        laser, goal = normalize_observation(*observation)
        out = self.net.forward(laser, goal, self.state)
        self.state = out.recurrent_state
        return greedy_action(out.policy) if self.greedy else sample_action(out.policy, self.rng)


class GoalSeekingAgent:
    """Scripted oracle: turn towards the goal until within half a turn step, then advance."""

    def __init__(self, tolerance: float = math.radians(4.0) + 1e-9):
        self.tolerance = tolerance

    def reset(self):
        pass

    def act(self, observation, env: NavEnv) -> Action:
        g = goal_observation(env.pose, env.goal)
        bearing = math.atan2(g.sin_rel, g.cos_rel)
        if abs(bearing) <= self.tolerance:
            return Action.FORWARD
        return Action.TURN_LEFT if bearing > 0 else Action.TURN_RIGHT


def run_agent(agent, suite: EvalSuite, reward_params: RewardParams | None = None) -> EvalResult:
    cfg = EpisodeConfig(max_steps=suite.max_steps, goal_radius=suite.goal_radius, robot_radius=suite.robot_radius)
    env = NavEnv(suite.map, cfg, reward_params)
    records = []
    for spec in suite.episodes:
        obs = env.reset(spec.start, spec.goal)
        agent.reset()
        total = 0.0
        while True:
            outcome, reward = env.step(agent.act(obs, env))
            total += reward
            obs = outcome.next_observation
            if outcome.terminal_kind is not TerminalKind.NONE:
                break
        records.append(EpisodeRecord(outcome.terminal_kind.value, env.steps, env.path_length, total))
    return EvalResult.from_records(records)


def run_eval(params, suite: EvalSuite, greedy: bool = True, network: NetworkConfig | None = None,
             seed: int = 0, reward_params: RewardParams | None = None) -> EvalResult:
    """Pure policy execution (no curiosity) of a parameter set over every suite episode."""
    return run_agent(NetworkAgent(params, network, greedy, seed), suite, reward_params)


def results_rows(map_name: str, config: str, result: EvalResult):
    for i, r in enumerate(result.episodes):
        yield {"map": map_name, "config": config, "episode": i, "outcome": r.outcome,
               "steps": r.steps, "path_m": f"{r.path_m:.6f}"}


def summary_row(map_name: str, config: str, result: EvalResult) -> dict:
    return {"map": map_name, "config": config, "episodes": len(result.episodes),
            "success_ratio": f"{result.success_ratio:.1f}",
            "steps_mean": f"{result.steps_mean:.3f}", "steps_std": f"{result.steps_std:.3f}",
            "success_steps_mean": f"{result.success_steps_mean:.3f}",
            "success_steps_std": f"{result.success_steps_std:.3f}"}


def write_csv(path_or_buf, columns, rows) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if own:
            fh.close()


@dataclass
class ComparisonReport:
    map_name: str
    rows: list[tuple[str, EvalResult]]

    @property
    def order(self) -> list[str]:
        return [name for name, _ in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        write_csv(buf, SUMMARY_COLUMNS, [summary_row(self.map_name, n, r) for n, r in self.rows])
        return buf.getvalue()

    def to_text(self) -> str:
        header = ("Exploration Strategy", "Success Ratio (%)", "Steps (mean±std)")
        body = [(n, f"{r.success_ratio:.1f}", f"{r.steps_mean:.3f}±{r.steps_std:.3f}") for n, r in self.rows]
        widths = [max(len(row[i]) for row in [header] + body) for i in range(3)]
        fmt = lambda row: "  ".join(cell.ljust(w) for cell, w in zip(row, widths))  # noqa: E731
        lines = [f"Map: {self.map_name}", fmt(header), "  ".join("-" * w for w in widths)]
        return "\n".join(lines + [fmt(row) for row in body]) + "\n"


def compare_configs(results: dict[str, EvalResult], map_name: str = "") -> ComparisonReport:
    """Rows in ascending success ratio; ties ordered by configuration name."""
    ranked = sorted(results.items(), key=lambda kv: (kv[1].success_ratio, kv[0]))
    return ComparisonReport(map_name, ranked)

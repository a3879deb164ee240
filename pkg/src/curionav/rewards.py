"""Extrinsic navigation reward: goal/collision/progress term plus the
stationary-position and heading-misalignment penalties."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class RewardParams:
    lambda_p: float = 1.0
    lambda_omega: float = 1.0 / (200.0 * math.pi)
    lambda_g: float = 0.15
    r_reach: float = 1.0
    r_collision: float = -5.0
    r_position: float = -0.05
    lambda_i: float = 1.0  # intrinsic reward scale

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not math.isfinite(value):
                raise ValueError(f"RewardParams.{name} must be finite, got {value}")


def _wrap(a: float) -> float:
    a = math.remainder(a, 2.0 * math.pi)
    return a + 2.0 * math.pi if a <= -math.pi else a


def _kind_name(kind) -> str:
    return getattr(kind, "value", kind) or "none"


def main_task_reward(prev_pose, pose, goal, terminal_kind, params: RewardParams = RewardParams()) -> float:
    kind = _kind_name(terminal_kind)
    if kind == "reached_goal":
        return params.r_reach
    if kind == "collision":
        return params.r_collision
    gx, gy = goal
    before = math.hypot(prev_pose.x - gx, prev_pose.y - gy)
    after = math.hypot(pose.x - gx, pose.y - gy)
    return params.lambda_g * (before - after)


def position_penalty(prev_pose, pose, params: RewardParams = RewardParams()) -> float:
    # exact comparison: turns leave x, y bit-identical
    if math.hypot(prev_pose.x - pose.x, prev_pose.y - pose.y) == 0.0:
        return params.r_position
    return 0.0


def orientation_penalty(pose, goal) -> float:
    """Negative absolute heading error towards the goal, in [-pi, 0]."""
    gx, gy = goal
    return -abs(_wrap(math.atan2(gy - pose.y, gx - pose.x) - pose.omega))


def extrinsic_reward(prev_pose, pose, goal, terminal_kind, params: RewardParams = RewardParams()) -> float:
    return (main_task_reward(prev_pose, pose, goal, terminal_kind, params)
            + params.lambda_p * position_penalty(prev_pose, pose, params)
            + params.lambda_omega * orientation_penalty(pose, goal))

"""Centralized assignment and planning: optimal assignment plus synchronized straight lines."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import WorldState
from ..env import collision_arrays, coverage_arrays, pairwise_distances
from .assignment import hungarian_assign


class UnsupportedConfigurationError(ValueError):
    pass


@dataclass
class CaptPlan:
    assignment: np.ndarray
    t_star: float
    waypoints: np.ndarray  # (steps + 1, N, 2) on the dt grid
    dt: float

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.waypoints))


def capt_plan(world: WorldState, speed: float, dt: float, squared: bool = True) -> CaptPlan:
    """All robots leave at t=0 and arrive together at ``t* = max_i dist_i / speed``."""
    if len(world.obstacle_positions):
        raise UnsupportedConfigurationError("CAPT is only defined for obstacle-free worlds")
    if speed <= 0 or dt <= 0:
        raise ValueError("speed and dt must be > 0")
    start, goals = world.robot_positions, world.goal_positions
    d = pairwise_distances(start, goals)
    mapping = hungarian_assign(d ** 2 if squared else d)
    target = goals[mapping]
    dist = np.sqrt(np.sum((target - start) ** 2, axis=-1))
    t_star = float(dist.max() / speed) if len(dist) else 0.0
    if t_star == 0.0:
        return CaptPlan(mapping, 0.0, start[None].copy(), dt)
    steps = math.ceil(t_star / dt - 1e-12)
    frac = np.minimum(dt * np.arange(steps + 1) / t_star, 1.0)
    waypoints = start[None] + frac[:, None, None] * (target - start)[None]
    return CaptPlan(mapping, t_star, waypoints, dt)


def capt_metrics(world: WorldState, plan: CaptPlan, coverage_radius: float, robot_radius: float):
    """``(time_to_full_coverage or None, collisions)`` along the sampled waypoints."""
    covered = coverage_arrays(plan.waypoints, world.goal_positions[None], coverage_radius)
    hit = np.flatnonzero(covered == world.n_robots)
    t_cover = float(hit[0] * plan.dt) if len(hit) else None
    collisions = int(np.sum(collision_arrays(plan.waypoints[1:], np.zeros((0, 2)), robot_radius, 0.0)))
    return t_cover, collisions

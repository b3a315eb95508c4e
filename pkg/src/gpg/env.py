"""Unlabeled motion-planning environment.

The array kernels (``*_arrays``) accept any number of leading batch axes so a
whole batch of episodes can be stepped at once; the ``WorldState`` functions
are thin wrappers around them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RunConfig, WorldState

SPAWN_BUDGET = 10_000


class InfeasibleSpawnError(RuntimeError):
    pass


@dataclass
class StepOutcome:
    next_state: WorldState
    reward: float
    covered_count: int
    collisions_this_step: int
    done: bool


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


# -- spawning -----------------------------------------------------------------

def _place(rng, count, lo, hi, ok, budget):
    placed = []
    for _ in range(count):
        while True:
            p = rng.uniform(lo, hi, size=2)
            if ok(p, placed):
                placed.append(p)
                break
            budget[0] -= 1
            if budget[0] <= 0:
                raise InfeasibleSpawnError(
                    f"spawn rejected {SPAWN_BUDGET} candidates; arena too crowded"
                )
    return np.array(placed).reshape(count, 2)


def spawn(config: RunConfig, rng: np.random.Generator) -> WorldState:
    """Sample a random instance by per-entity rejection sampling.

    Robots are pairwise ``min_spawn_separation`` apart, goals likewise, and both
    keep ``obstacle_radius + min_spawn_separation`` clearance from obstacle centres.
    """
    sep = config.min_spawn_separation
    w = config.arena_half_width
    budget = [SPAWN_BUDGET]
    obstacles = _place(rng, config.n_obstacles, -w, w, lambda p, done: True, budget)
    clear = config.obstacle_radius + sep

    def free_of(p, placed):
        if len(obstacles) and np.min(np.hypot(*(obstacles - p).T)) < clear:
            return False
        return all(np.hypot(*(p - q)) >= sep for q in placed)

    robots = _place(rng, config.n_robots, -w, w, free_of, budget)
    goals = _place(rng, config.n_robots, -w, w, free_of, budget)
    return WorldState(robots, goals, obstacles, config.obstacle_radius, 0)


# -- reward -------------------------------------------------------------------

def coverage_arrays(robots: np.ndarray, goals: np.ndarray, R: float) -> np.ndarray:
    """Covered-goal counts, shape = leading batch shape."""
    d = pairwise_distances(goals, robots)
    return np.sum(np.min(d, axis=-1) <= R, axis=-1)


def coverage_reward(world: WorldState, R: float):
    """``(covered_count - N, covered_count)``; a goal counts once however many robots cover it."""
    covered = int(coverage_arrays(world.robot_positions, world.goal_positions, R))
    return float(covered - world.n_robots), covered


# -- dynamics -----------------------------------------------------------------

def clip_actions(actions: np.ndarray, a_max: float) -> np.ndarray:
    norm = np.sqrt(np.sum(actions * actions, axis=-1, keepdims=True))
    scale = np.minimum(1.0, a_max / np.maximum(norm, 1e-300))
    return actions * scale


def integrate(robots: np.ndarray, actions: np.ndarray, config: RunConfig) -> np.ndarray:
    if not np.all(np.isfinite(actions)):
        raise ValueError("actions contain NaN or inf")
    a = clip_actions(actions, config.a_max)
    if config.dynamics_kind == "single_integrator":
        a = a * config.dt
    w = config.arena_half_width
    return np.clip(robots + a, -w, w)


def collision_arrays(robots, obstacles, robot_radius, obstacle_radius) -> np.ndarray:
    """Robot pairs closer than ``2 * robot_radius`` plus robot-obstacle overlaps."""
    n = robots.shape[-2]
    d = pairwise_distances(robots, robots)
    iu = np.triu_indices(n, k=1)
    count = np.sum(d[..., iu[0], iu[1]] < 2 * robot_radius, axis=-1)
    if obstacles.shape[-2]:
        do = pairwise_distances(robots, obstacles)
        count = count + np.sum(do < robot_radius + obstacle_radius, axis=(-2, -1))
    return count


def step(world: WorldState, actions: np.ndarray, config: RunConfig) -> StepOutcome:
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != world.robot_positions.shape:
        raise ValueError(f"actions must have shape {world.robot_positions.shape}")
    robots = integrate(world.robot_positions, actions, config)
    nxt = WorldState(robots, world.goal_positions, world.obstacle_positions,
                     world.obstacle_radius, world.time_index + 1)
    reward, covered = coverage_reward(nxt, config.coverage_radius)
    collisions = int(collision_arrays(robots, world.obstacle_positions,
                                      config.robot_radius, world.obstacle_radius))
    done = covered == world.n_robots or nxt.time_index >= config.horizon
    return StepOutcome(nxt, reward, covered, collisions, done)


# -- sensing ------------------------------------------------------------------

def nearest_indices(src: np.ndarray, dst: np.ndarray, count: int, exclude_self: bool = False):
    """Indices of the ``count`` entities of ``dst`` nearest each row of ``src``.

    Ties go to the lower index (stable sort). With ``exclude_self`` the
    diagonal is skipped (``src`` and ``dst`` are the same set).
    """
    d = pairwise_distances(src, dst)
    if exclude_self:
        n = d.shape[-1]
        d = d.copy()
        d[..., np.arange(n), np.arange(n)] = -1.0
        order = np.argsort(d, axis=-1, kind="stable")[..., 1:]
    else:
        order = np.argsort(d, axis=-1, kind="stable")
    return order[..., :count]


def _gather_block(robots, entities, idx, count, config):
    """``count`` slots of positions (relative or absolute), zero-filled when short."""
    lead = robots.shape[:-1]
    out = np.zeros(lead + (count, 2))
    have = idx.shape[-1]
    if have:
        pts = np.take_along_axis(entities[..., None, :, :], idx[..., None], axis=-2)
        rel = pts - robots[..., None, :]
        norm = np.sqrt(np.sum(rel * rel, axis=-1, keepdims=True))
        cap = config.sense_range
        rel = np.where(norm > cap, rel * (cap / np.maximum(norm, 1e-300)), rel)
        out[..., :have, :] = rel
    if not config.relative_obs:
        out = out + robots[..., None, :]
    return out.reshape(lead + (2 * count,))


def observation_arrays(robots, goals, obstacles, config: RunConfig) -> np.ndarray:
    """Observation matrix ``X`` of shape ``(..., N, d0)``.

    Row ``n`` holds the own slot then the ``M_robots`` nearest robots, the
    ``M_goals`` nearest goals and the ``M_obstacles`` nearest obstacles.
    """
    own = np.zeros(robots.shape) if config.relative_obs else robots
    blocks = [own]
    n = robots.shape[-2]
    specs = [(robots, min(config.M_robots, n - 1), config.M_robots, True),
             (goals, min(config.M_goals, goals.shape[-2]), config.M_goals, False),
             (obstacles, min(config.M_obstacles, obstacles.shape[-2]), config.M_obstacles, False)]
    for entities, have, want, exclude in specs:
        if want == 0:
            continue
        idx = nearest_indices(robots, entities, have, exclude_self=exclude)
        if entities.ndim < robots.ndim:
            entities = np.broadcast_to(entities, robots.shape[:-2] + entities.shape)
        blocks.append(_gather_block(robots, entities, idx, want, config))
    return np.concatenate(blocks, axis=-1)


def graph_arrays(robots: np.ndarray, config: RunConfig) -> np.ndarray:
    """Graph shift operator(s) of shape ``(..., N, N)``: self loop plus ``M_robots`` nearest."""
    n = robots.shape[-2]
    m = min(config.M_robots, n - 1)
    S = np.zeros(robots.shape[:-1] + (n,))
    eye = np.arange(n)
    S[..., eye, eye] = 1.0
    if m:
        idx = nearest_indices(robots, robots, m, exclude_self=True)
        np.put_along_axis(S, idx, 1.0, axis=-1)
    if config.normalize_graph:
        S = normalize_shift(S)
    return S


def normalize_shift(S: np.ndarray) -> np.ndarray:
    """Symmetric degree normalisation ``D^-1/2 S D^-1/2`` using row degrees."""
    deg = np.sum(S, axis=-1)
    inv = 1.0 / np.sqrt(deg)
    return S * inv[..., :, None] * inv[..., None, :]


def build_observation(world: WorldState, config: RunConfig) -> np.ndarray:
    return observation_arrays(world.robot_positions, world.goal_positions,
                              world.obstacle_positions, config)


def build_graph(world: WorldState, config: RunConfig) -> np.ndarray:
    return graph_arrays(world.robot_positions, config)

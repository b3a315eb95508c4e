"""Velocity-obstacle backup layer for velocity-controlled robots."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import WorldState
from ..env import clip_actions


@dataclass
class VOConfig:
    time_horizon: float = 2.0
    safety_radius: float = 0.05
    max_speed: float = 1.0
    n_directions: int = 64
    n_magnitudes: int = 8
    min_horizon: float = 0.1

    def validate(self, robot_radius: float = 0.0) -> "VOConfig":
        if self.time_horizon <= 0:
            raise ValueError("time_horizon must be > 0")
        if self.safety_radius < 2 * robot_radius or self.safety_radius <= 0:
            raise ValueError(f"safety_radius must be >= 2 * robot_radius = {2 * robot_radius}")
        if self.max_speed <= 0:
            raise ValueError("max_speed must be > 0")
        if not 0 < self.min_horizon <= self.time_horizon:
            raise ValueError("min_horizon must lie in (0, time_horizon]")
        return self

    def candidates(self) -> np.ndarray:
        """The sampled velocity set, direction-major: 64 headings x 8 speeds."""
        ang = 2 * np.pi * np.arange(self.n_directions) / self.n_directions
        mags = self.max_speed * np.arange(1, self.n_magnitudes + 1) / self.n_magnitudes
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        return (dirs[:, None, :] * mags[None, :, None]).reshape(-1, 2)


def closest_approach(rel_pos: np.ndarray, rel_vel: np.ndarray, horizon: float) -> np.ndarray:
    """``min_{0<=t<=horizon} |rel_pos + t rel_vel|``, broadcasting over leading axes."""
    vv = np.sum(rel_vel * rel_vel, axis=-1)
    pv = np.sum(rel_pos * rel_vel, axis=-1)
    t = np.where(vv > 0, np.clip(-pv / np.where(vv > 0, vv, 1.0), 0.0, horizon), 0.0)
    gap = rel_pos + t[..., None] * rel_vel
    return np.sqrt(np.sum(gap * gap, axis=-1))


def _safe(v, pos, others, other_vel, radii, horizon):
    """Which velocities in ``v`` (K, 2) keep clear of every other body.

    Bodies already inside their radius only need a non-approaching velocity.
    """
    if len(others) == 0:
        return np.ones(len(v), dtype=bool)
    rel_pos = pos - others                                  # (J, 2)
    rel_vel = v[:, None, :] - other_vel[None, :, :]         # (K, J, 2)
    d = closest_approach(rel_pos[None], rel_vel, horizon)   # (K, J)
    inside = np.sqrt(np.sum(rel_pos * rel_pos, axis=-1)) < radii
    receding = np.sum(rel_pos[None] * rel_vel, axis=-1) >= 0
    ok = np.where(inside[None], receding, d >= radii[None])
    return np.all(ok, axis=1)


def vo_filter(world: WorldState, nominal_actions: np.ndarray, vo_config: VOConfig,
              velocities: Optional[np.ndarray] = None, robot_radius: float = 0.0):
    """Replace velocities that would bring a robot within ``safety_radius`` inside the horizon.

    ``velocities`` are the robots' current velocities (defaults to the nominal
    ones). Robots are resolved in index order: when robot ``i`` picks a
    replacement it predicts lower-index robots with the velocity they just
    committed to and the others with their current velocity, so every pair
    ends up clear under the returned velocities whenever a safe sample exists.
    Static obstacles are velocity obstacles with zero velocity and radius
    ``obstacle_radius + safety_radius / 2``.

    When no sample is safe over ``time_horizon`` the horizon is halved down to
    ``min_horizon`` (one control step), and the robot stops only if nothing is
    safe even then.

    Returns ``(safe_actions, interventions)``.
    """
    pos = world.robot_positions
    n = len(pos)
    nominal = clip_actions(np.asarray(nominal_actions, dtype=np.float64), vo_config.max_speed)
    current = nominal if velocities is None else np.asarray(velocities, dtype=np.float64)
    committed = nominal.copy()
    flagged = np.zeros(n, dtype=bool)
    cands = vo_config.candidates()
    obst = world.obstacle_positions
    obst_r = world.obstacle_radius + 0.5 * vo_config.safety_radius
    tau = vo_config.time_horizon
    for i in range(n):
        others = np.delete(np.arange(n), i)
        ref = np.where((others < i)[:, None], committed[others], current[others])
        bodies = np.concatenate([pos[others], obst])
        body_vel = np.concatenate([ref, np.zeros_like(obst)])
        radii = np.concatenate([np.full(len(others), vo_config.safety_radius),
                                np.full(len(obst), obst_r)])
        mine = nominal[i][None]
        unsafe = not _safe(mine, pos[i], bodies, body_vel, radii, tau)[0]
        # the plain VO test against everyone's current velocity
        unsafe |= not _safe(mine, pos[i], pos[others], current[others],
                            radii[:len(others)], tau)[0]
        if not unsafe:
            continue
        flagged[i] = True
        ok = _safe(cands, pos[i], bodies, body_vel, radii, tau)
        horizon = tau
        while not np.any(ok) and horizon > vo_config.min_horizon:
            horizon = max(0.5 * horizon, vo_config.min_horizon)
            ok = _safe(cands, pos[i], bodies, body_vel, radii, horizon)
        if np.any(ok):
            dev = np.sum((cands[ok] - nominal[i]) ** 2, axis=-1)
            committed[i] = cands[ok][np.argmin(dev)]
        else:
            committed[i] = 0.0
    return committed, flagged

"""Shared domain types, run configuration, permutations and seeded RNG streams."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

DYNAMICS_KINDS = ("point_mass", "single_integrator")


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str, line: Optional[int] = None):
        self.field = field_name
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field_name}: {message}")


def _as_points(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must be an (n, 2) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


@dataclass
class WorldState:
    robot_positions: np.ndarray
    goal_positions: np.ndarray
    obstacle_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    obstacle_radius: float = 0.0
    time_index: int = 0

    def __post_init__(self):
        self.robot_positions = _as_points(self.robot_positions, "robot_positions")
        self.goal_positions = _as_points(self.goal_positions, "goal_positions")
        self.obstacle_positions = _as_points(self.obstacle_positions, "obstacle_positions")
        if len(self.robot_positions) != len(self.goal_positions):
            raise ValueError(
                f"robot and goal counts differ: {len(self.robot_positions)} vs "
                f"{len(self.goal_positions)}"
            )
        if self.obstacle_radius < 0 or not math.isfinite(self.obstacle_radius):
            raise ValueError("obstacle_radius must be finite and >= 0")
        if self.time_index < 0:
            raise ValueError("time_index must be >= 0")

    @property
    def n_robots(self) -> int:
        return len(self.robot_positions)

    def permuted(self, perm: "Permutation", goal_perm: Optional["Permutation"] = None) -> "WorldState":
        """Relabel robots (and optionally goals); geometry is untouched."""
        goals = self.goal_positions if goal_perm is None else self.goal_positions[goal_perm.perm]
        return WorldState(
            self.robot_positions[perm.perm], goals, self.obstacle_positions,
            self.obstacle_radius, self.time_index,
        )


@dataclass(frozen=True)
class Permutation:
    """A bijection on ``{0..N-1}``.

    Row ``i`` of ``P^T X`` is row ``perm[i]`` of ``X``, i.e. the dense matrix
    has ``P[perm[i], i] = 1``.
    """

    perm: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.perm, dtype=np.int64)
        if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(len(p))):
            raise ValueError("perm must be a bijection on {0..N-1}")
        object.__setattr__(self, "perm", p)

    def __len__(self):
        return len(self.perm)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "Permutation":
        return cls(rng.permutation(n))

    def inverse(self) -> "Permutation":
        return Permutation(np.argsort(self.perm))

    def matrix(self) -> np.ndarray:
        n = len(self.perm)
        P = np.zeros((n, n))
        P[self.perm, np.arange(n)] = 1.0
        return P


def apply_permutation(P: Permutation, X: np.ndarray, S: np.ndarray):
    """Return ``(P^T X, P^T S P)`` by index gathers (exact)."""
    X = np.asarray(X)
    S = np.asarray(S)
    n = len(P)
    if X.shape[0] != n or S.shape != (n, n):
        raise ValueError(
            f"permutation of size {n} does not match X {X.shape} / S {S.shape}"
        )
    p = P.perm
    return X[p], S[np.ix_(p, p)]


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic generator for ``seed``; extra ints select an independent sub-stream.

    ``seeded_rng(seed, it, ep)`` is the stream of episode ``ep`` in iteration
    ``it`` and does not depend on how many other streams were drawn.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class RunConfig:
    n_robots: int = 3
    coverage_radius: float = 0.1
    M_robots: int = 1
    M_goals: int = 2
    M_obstacles: int = 0
    n_obstacles: int = 0
    obstacle_radius: float = 0.1
    K: int = 3
    L: int = 2
    layer_widths: Optional[Sequence[int]] = None
    hidden_width: int = 32
    gamma: float = 0.95
    horizon: int = 200
    dynamics_kind: str = "point_mass"
    dt: float = 0.1
    a_max: float = 0.1
    seed: int = 0
    arena_half_width: float = 1.0
    min_spawn_separation: float = 0.2
    robot_radius: Optional[float] = None
    sense_range: Optional[float] = None
    relative_obs: bool = True
    normalize_graph: bool = False

    def __post_init__(self):
        if self.robot_radius is None:
            self.robot_radius = 0.1 * self.min_spawn_separation
        if self.sense_range is None:
            self.sense_range = 10.0 * self.coverage_radius
        if self.layer_widths is None:
            self.layer_widths = (self.obs_width,) + (self.hidden_width,) * (self.L - 1) + (2,)
        self.layer_widths = tuple(int(w) for w in self.layer_widths)

    @property
    def obs_width(self) -> int:
        return 2 * (self.M_robots + self.M_goals + self.M_obstacles + 1)

    def validate(self, allow_sparse: bool = False) -> "RunConfig":
        """Raise ConfigError on the first invalid field.

        ``allow_sparse`` admits swarms with fewer robots/goals than the sensing
        counts (missing slots are zero-filled); evaluation uses it, training does not.
        """

        def need(ok, name, msg):
            if not ok:
                raise ConfigError(name, msg)

        need(self.n_robots >= 1, "n_robots", "must be a positive integer")
        need(self.coverage_radius > 0, "coverage_radius", "must be > 0")
        for name in ("M_robots", "M_goals", "M_obstacles", "n_obstacles"):
            need(getattr(self, name) >= 0, name, "must be >= 0")
        if not allow_sparse:
            need(self.M_robots <= self.n_robots - 1, "M_robots",
                 f"must be <= n_robots - 1 ({self.n_robots - 1})")
            need(self.M_goals <= self.n_robots, "M_goals", f"must be <= n_robots ({self.n_robots})")
        need(self.K >= 1, "K", "must be >= 1")
        need(self.L >= 1, "L", "must be >= 1")
        need(len(self.layer_widths) == self.L + 1, "layer_widths",
             f"needs L + 1 = {self.L + 1} entries")
        need(self.layer_widths[0] == self.obs_width, "layer_widths",
             f"first width must equal the observation width {self.obs_width}")
        need(self.layer_widths[-1] == 2, "layer_widths", "last width must be 2 (planar action)")
        need(all(w >= 1 for w in self.layer_widths), "layer_widths", "widths must be positive")
        need(0 < self.gamma <= 1, "gamma", "must lie in (0, 1]")
        need(self.horizon >= 1, "horizon", "must be a positive integer")
        need(self.dynamics_kind in DYNAMICS_KINDS, "dynamics_kind",
             f"must be one of {', '.join(DYNAMICS_KINDS)}")
        need(self.dt > 0, "dt", "must be > 0")
        need(self.a_max > 0, "a_max", "must be > 0")
        need(0 <= self.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
        need(self.arena_half_width > 0, "arena_half_width", "must be > 0")
        need(self.min_spawn_separation > 0, "min_spawn_separation", "must be > 0")
        need(self.robot_radius >= 0, "robot_radius", "must be >= 0")
        need(self.sense_range > 0, "sense_range", "must be > 0")
        need(self.obstacle_radius >= 0, "obstacle_radius", "must be >= 0")
        return self

    def replace(self, **changes) -> "RunConfig":
        """Copy with changes; derived defaults are recomputed unless given."""
        values = dataclasses.asdict(self)
        if any(k in changes for k in ("M_robots", "M_goals", "M_obstacles", "L", "hidden_width")):
            values["layer_widths"] = None
        if "coverage_radius" in changes:
            values["sense_range"] = None
        if "min_spawn_separation" in changes:
            values["robot_radius"] = None
        values.update(changes)
        return RunConfig(**values)

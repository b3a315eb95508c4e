"""CAPT vs GPG vs GPG+VO on identical formation instances.

Kept out of the package namespace import because it depends on ``training``,
which itself imports the VO layer from this package.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..core import RunConfig
from ..policy import GaussianPolicy
from ..training import transfer_eval
from .capt import capt_metrics, capt_plan
from .formations import FormationSpec, check_inside, make_formation
from .vo import VOConfig

METHODS = ("CAPT", "GPG", "GPG+VO")


@dataclass
class MethodStats:
    times: List[float] = field(default_factory=list)
    collisions: List[int] = field(default_factory=list)
    planning: List[float] = field(default_factory=list)
    successes: int = 0

    def mean_std(self, values) -> tuple:
        v = np.asarray(values, dtype=np.float64)
        return float(v.mean()), float(v.std())


@dataclass
class Comparison:
    formation: str
    n_robots: int
    methods: Dict[str, MethodStats]

    def row(self) -> dict:
        """Means and standard deviations of time-to-coverage and collisions per method."""
        out = {"formation": self.formation}
        for name in METHODS:
            st = self.methods[name]
            out[f"{name}_T"], out[f"{name}_T_std"] = st.mean_std(st.times)
            out[f"{name}_C"], out[f"{name}_C_std"] = st.mean_std(st.collisions)
        return out


def formation_worlds(spec: FormationSpec, n: int, runs: int, seed: int):
    return [make_formation(spec, n, seed + i) for i in range(runs)]


def compare_run(policy: GaussianPolicy, spec: FormationSpec, config: RunConfig, runs: int,
                vo: VOConfig, speed: Optional[float] = None) -> Comparison:
    """Run the three planners on ``runs`` instances of ``spec`` with ``config.n_robots`` robots.

    Time is time to full coverage; an episode that never covers every goal is
    charged the full horizon. CAPT moves at ``speed`` (default ``a_max``, the
    policies' speed limit). Planning time is assignment plus planning wall time
    for CAPT and summed forward-pass wall time for the policies.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    speed = config.a_max if speed is None else speed
    worlds = formation_worlds(spec, config.n_robots, runs, config.seed)
    check_inside(worlds, config.arena_half_width)
    horizon_time = config.horizon * config.dt
    stats = {name: MethodStats() for name in METHODS}

    capt = stats["CAPT"]
    for w in worlds:
        tic = time.perf_counter()
        plan = capt_plan(w, speed, config.dt)
        capt.planning.append(time.perf_counter() - tic)
        t_cover, col = capt_metrics(w, plan, config.coverage_radius, config.robot_radius)
        capt.times.append(horizon_time if t_cover is None else t_cover)
        capt.collisions.append(col)
        capt.successes += t_cover is not None

    for name, layer in (("GPG", None), ("GPG+VO", vo)):
        timing: list = []
        metrics = transfer_eval(policy, config, runs, worlds=worlds, vo=layer, timing=timing)
        st = stats[name]
        for tr in metrics.episodes:
            st.times.append(tr.length * config.dt)
            st.collisions.append(int(np.sum(tr.collisions)))
            st.successes += tr.success
        st.planning.append(float(np.sum(timing)) / runs)
    return Comparison(str(spec), config.n_robots, stats)


def assignment_timings(sizes, repeats: int = 3, seed: int = 0) -> Dict[int, float]:
    """Best-of-``repeats`` wall time of one assignment on random ``n x n`` squared-distance costs."""
    from ..core import seeded_rng
    from .assignment import hungarian_assign

    out = {}
    for n in sizes:
        rng = seeded_rng(seed, n)
        a, b = rng.uniform(-1, 1, (n, 2)), rng.uniform(-1, 1, (n, 2))
        cost = np.sum((a[:, None] - b[None]) ** 2, axis=-1)
        best = np.inf
        for _ in range(repeats):
            tic = time.perf_counter()
            hungarian_assign(cost)
            best = min(best, time.perf_counter() - tic)
        out[n] = best
    return out


def inference_timings(policy: GaussianPolicy, config: RunConfig, sizes, repeats: int = 3,
                      seed: int = 0) -> Dict[int, float]:
    """Best-of-``repeats`` wall time of one policy step (sensing, graph, forward) for each N."""
    from ..core import seeded_rng
    from ..env import graph_arrays, observation_arrays
    from ..policy import policy_mean

    out = {}
    for n in sizes:
        cfg = config.replace(n_robots=n)
        rng = seeded_rng(seed, n)
        w = cfg.arena_half_width
        r, g = rng.uniform(-w, w, (n, 2)), rng.uniform(-w, w, (n, 2))
        best = np.inf
        for _ in range(repeats):
            tic = time.perf_counter()
            X = observation_arrays(r, g, np.zeros((0, 2)), cfg)
            S = graph_arrays(r, cfg)
            policy_mean(X, S, policy)
            best = min(best, time.perf_counter() - tic)
        out[n] = best
    return out

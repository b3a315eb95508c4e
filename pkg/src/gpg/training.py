"""REINFORCE training of the filter tensor and zero-shot evaluation of trained filters."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .baselines.vo import VOConfig, vo_filter
from .core import ConfigError, RunConfig, WorldState, seeded_rng
from .env import (collision_arrays, coverage_arrays, graph_arrays, integrate,
                  observation_arrays, spawn)
from .gnn import gnn_backward, gnn_forward
from .policy import GaussianPolicy, act, log_prob_grad

log = logging.getLogger(__name__)

# sub-stream tags under the run seed
_INIT, _TRAIN, _EVAL, _START = 0, 1, 2, 3
_GRAD_CHUNK = 512  # steps per forward/backward slab when estimating gradients


class WidthMismatchError(ValueError):
    pass


@dataclass
class TrainParams:
    iterations: int = 3000
    batch_size: int = 32
    step_size: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    baseline: bool = True
    literal_estimator: bool = False
    vo_training: bool = False
    vo_penalty: float = 1.0
    vo_time_horizon: float = 2.0
    vo_safety_factor: float = 2.5
    threads: int = 1
    stop_coverage: float = 0.0
    stop_window: int = 10
    bound_penalty: float = 0.0
    group_size: int = 1

    def validate(self) -> "TrainParams":
        if self.iterations < 0:
            raise ConfigError("iterations", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.step_size < 0:
            raise ConfigError("step_size", "must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1", "beta1 and beta2 must lie in [0, 1)")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip", "must be > 0")
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        if self.vo_safety_factor < 2:
            raise ConfigError("vo_safety_factor", "safety radius must be >= 2 robot radii")
        if self.stop_window < 1:
            raise ConfigError("stop_window", "must be >= 1")
        if not self.bound_penalty >= 0:
            raise ConfigError("bound_penalty", "must be >= 0")
        if self.group_size < 1 or self.batch_size % self.group_size:
            raise ConfigError("group_size", "must be >= 1 and divide batch_size")
        return self


def vo_config_for(config: RunConfig, params: TrainParams) -> VOConfig:
    return VOConfig(time_horizon=params.vo_time_horizon,
                    safety_radius=params.vo_safety_factor * config.robot_radius,
                    max_speed=config.a_max,
                    min_horizon=min(config.dt, params.vo_time_horizon)).validate(config.robot_radius)


# -- returns --------------------------------------------------------------------

def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """Reward-to-go ``G_t = sum_{s>=t} gamma^(s-t) r_s``."""
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


# -- rollouts ---------------------------------------------------------------------

@dataclass
class EpisodeTrace:
    """One episode. ``positions`` has one more frame than the per-step arrays."""

    positions: np.ndarray       # (T+1, N, 2)
    goals: np.ndarray           # (N, 2)
    obstacles: np.ndarray       # (O, 2)
    obstacle_radius: float
    observations: np.ndarray    # (T, N, d0)
    graphs: np.ndarray          # (T, N, N)
    actions: np.ndarray         # (T, N, 2) sampled, pre-clip
    log_probs: np.ndarray       # (T, N)
    rewards: np.ndarray         # (T,)
    covered: np.ndarray         # (T,)
    collisions: np.ndarray      # (T,)
    interventions: np.ndarray   # (T, N) VO replacements
    success: bool               # reached full coverage

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def n_robots(self) -> int:
        return self.positions.shape[1]

    @property
    def final_coverage(self) -> float:
        return float(self.covered[-1]) / self.n_robots if self.length else 0.0

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))

    def to_json(self, dt: float) -> dict:
        return {
            "dt": dt,
            "robots": self.positions.tolist(),
            "goals": self.goals.tolist(),
            "obstacles": self.obstacles.tolist(),
            "obstacle_radius": self.obstacle_radius,
            "covered": self.covered.tolist(),
            "collisions": self.collisions.tolist(),
            "success": self.success,
        }


def rollout(policy: GaussianPolicy, config: RunConfig, worlds: Sequence[WorldState],
            noises: Sequence[np.ndarray], vo: Optional[VOConfig] = None,
            vo_penalty: float = 0.0, timing: Optional[list] = None) -> List[EpisodeTrace]:
    """Run all ``worlds`` in lockstep until each reaches full coverage or the horizon.

    ``noises[e]`` is the standard-normal exploration noise of episode ``e``,
    shape ``(horizon, N, 2)``. Every quantity is computed row-wise, so an
    episode's trace does not depend on which other episodes share the batch.
    ``timing``, when given, collects the wall time of each policy evaluation.
    """
    if vo is not None and config.dynamics_kind != "single_integrator":
        raise ConfigError("dynamics_kind", "the VO layer needs single_integrator dynamics")
    B = len(worlds)
    if B == 0:
        return []
    robots = np.stack([w.robot_positions for w in worlds])
    goals = np.stack([w.goal_positions for w in worlds])
    obstacles = np.stack([w.obstacle_positions for w in worlds])
    n = robots.shape[1]
    T = config.horizon
    noise = np.stack([np.asarray(z)[:T] for z in noises])
    prev = robots.copy()
    alive = np.ones(B, dtype=bool)
    d0 = config.obs_width
    rec = {
        "X": np.zeros((T, B, n, d0)), "S": np.zeros((T, B, n, n)),
        "a": np.zeros((T, B, n, 2)), "lp": np.zeros((T, B, n)), "r": np.zeros((T, B)),
        "cov": np.zeros((T, B), dtype=np.int64), "col": np.zeros((T, B), dtype=np.int64),
        "vo": np.zeros((T, B, n), dtype=bool), "pos": np.zeros((T + 1, B, n, 2)),
    }
    rec["pos"][0] = robots
    length = np.zeros(B, dtype=np.int64)
    success = np.zeros(B, dtype=bool)
    for t in range(T):
        idx = np.flatnonzero(alive)
        r, g, o = robots[idx], goals[idx], obstacles[idx]
        X = observation_arrays(r, g, o, config)
        S = graph_arrays(r, config)
        tic = time.perf_counter()
        a, lp, _ = act(X, S, policy, noise=noise[idx, t])
        if timing is not None:
            timing.append(time.perf_counter() - tic)
        flags = np.zeros((len(idx), n), dtype=bool)
        executed = a
        if vo is not None:
            executed = np.empty_like(a)
            vel = (r - prev[idx]) / config.dt
            for j, e in enumerate(idx):
                w = WorldState(r[j], g[j], o[j], worlds[e].obstacle_radius)
                executed[j], flags[j] = vo_filter(w, a[j], vo, velocities=vel[j],
                                                  robot_radius=config.robot_radius)
        nxt = integrate(r, executed, config)
        covered = coverage_arrays(nxt, g, config.coverage_radius)
        obst_r = np.array([worlds[e].obstacle_radius for e in idx])[:, None, None]
        col = collision_arrays(nxt, o, config.robot_radius, obst_r)
        reward = (covered - n).astype(np.float64) - vo_penalty * np.any(flags, axis=1)
        for key, val in (("X", X), ("S", S), ("a", a), ("lp", lp), ("r", reward),
                         ("cov", covered), ("col", col), ("vo", flags), ("pos", nxt)):
            rec[key][t + (key == "pos"), idx] = val
        prev[idx] = r
        robots = robots.copy()
        robots[idx] = nxt
        length[idx] += 1
        done = covered == n
        success[idx[done]] = True
        alive[idx[done]] = False
        if not alive.any():
            break
    traces = []
    for e in range(B):
        k = length[e]
        traces.append(EpisodeTrace(
            positions=rec["pos"][:k + 1, e].copy(), goals=goals[e], obstacles=obstacles[e],
            obstacle_radius=worlds[e].obstacle_radius,
            observations=rec["X"][:k, e].copy(), graphs=rec["S"][:k, e].copy(),
            actions=rec["a"][:k, e].copy(), log_probs=rec["lp"][:k, e].copy(),
            rewards=rec["r"][:k, e].copy(), covered=rec["cov"][:k, e].copy(),
            collisions=rec["col"][:k, e].copy(), interventions=rec["vo"][:k, e].copy(),
            success=bool(success[e]),
        ))
    return traces


def collect_batch(policy: GaussianPolicy, config: RunConfig, seed_stream: Sequence[int],
                  batch_size: int, vo: Optional[VOConfig] = None, vo_penalty: float = 0.0,
                  threads: int = 1, worlds: Optional[Sequence[WorldState]] = None,
                  timing: Optional[list] = None):
    """Spawn (unless ``worlds`` given) and roll out ``batch_size`` episodes.

    Episode ``e`` draws from ``seeded_rng(config.seed, *seed_stream, e)``; the
    batch is split into contiguous chunks across ``threads`` workers and
    reassembled in episode order, so results do not depend on ``threads``.
    """
    if worlds is None:
        worlds, noises = [], []
        for e in range(batch_size):
            rng = seeded_rng(config.seed, *seed_stream, e)
            worlds.append(spawn(config, rng))
            noises.append(rng.standard_normal((config.horizon, config.n_robots, 2)))
    else:
        noises = [seeded_rng(config.seed, *seed_stream, e).standard_normal(
            (config.horizon, w.n_robots, 2)) for e, w in enumerate(worlds)]
    chunks = np.array_split(np.arange(len(worlds)), max(1, min(threads, len(worlds))))
    if len(chunks) == 1:
        return rollout(policy, config, worlds, noises, vo, vo_penalty, timing)
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = pool.map(lambda c: rollout(policy, config, [worlds[i] for i in c],
                                           [noises[i] for i in c], vo, vo_penalty), chunks)
        return [tr for part in parts for tr in part]


# -- gradient estimation --------------------------------------------------------

def step_weights(batch: Sequence[EpisodeTrace], gamma: float, baseline: bool = True,
                 literal: bool = False, group_size: int = 1) -> List[np.ndarray]:
    """Per-episode, per-step weights multiplying the joint score ``grad log Pi_t``.

    Reward-to-go: ``(G_t - b_t) / B`` with ``b_t`` the batch mean of ``G_t``
    (finished episodes contribute ``G_t = 0``). Literal: every step of episode
    ``e`` gets the whole discounted return ``(R_e - b) / B``.

    With ``group_size > 1`` consecutive groups of that many episodes share a
    start state and the baseline is the mean over the group instead of the
    whole batch.
    """
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    if B % group_size:
        raise ValueError("group_size must divide the batch size")
    T = max(tr.length for tr in batch)
    G = np.zeros((B, T))
    for e, tr in enumerate(batch):
        if literal:
            disc = gamma ** np.arange(tr.length)
            G[e, :tr.length] = np.sum(disc * tr.rewards)
        else:
            G[e, :tr.length] = discounted_returns(tr.rewards, gamma)
    if baseline:
        groups = B // group_size if group_size > 1 else 1
        grouped = G.reshape(groups, B // groups, T)
        if literal:
            grouped = grouped - np.mean(grouped[:, :, :1], axis=1, keepdims=True)
        else:
            grouped = grouped - np.mean(grouped, axis=1, keepdims=True)
        G = grouped.reshape(B, T)
    return [G[e, :tr.length] / B for e, tr in enumerate(batch)]


def estimate_gradient(batch: Sequence[EpisodeTrace], policy: GaussianPolicy, gamma: float,
                      baseline: bool = True, literal: bool = False,
                      group_size: int = 1) -> np.ndarray:
    """Score-function gradient estimate, flattened like ``policy.to_vector()``."""
    weights = step_weights(batch, gamma, baseline, literal, group_size)
    keep = [e for e, tr in enumerate(batch) if tr.length]
    X = np.concatenate([batch[e].observations for e in keep])
    S = np.concatenate([batch[e].graphs for e in keep])
    A = np.concatenate([batch[e].actions for e in keep])
    w = np.concatenate([weights[e] for e in keep])
    total = np.zeros(policy.to_vector().size)
    for lo in range(0, len(X), _GRAD_CHUNK):
        sl = slice(lo, lo + _GRAD_CHUNK)
        _, trace = gnn_forward(X[sl], S[sl], policy.gnn)
        grad_H, grad_log_std = log_prob_grad(trace, S[sl], A[sl], policy, weights=w[sl, None])
        total += np.concatenate([grad_H.to_vector(), grad_log_std])
    return total


def bound_gradient(batch: Sequence[EpisodeTrace], policy: GaussianPolicy, a_max: float,
                   coeff: float) -> np.ndarray:
    """Gradient of ``-coeff / B * sum max(0, |mu| / a_max - 1)^2`` over every visited step.

    The environment clips actions to ``a_max``, so once ``|mu|`` is well past
    the bound the executed action stops depending on the exploration noise
    and the score-function estimate carries no signal about the excess. This
    soft bound supplies the missing restoring force; inside the bound it is zero.
    """
    size = policy.to_vector().size
    keep = [tr for tr in batch if tr.length]
    if coeff == 0 or not keep:
        return np.zeros(size)
    X = np.concatenate([tr.observations for tr in keep])
    S = np.concatenate([tr.graphs for tr in keep])
    total = np.zeros(size)
    for lo in range(0, len(X), _GRAD_CHUNK):
        sl = slice(lo, lo + _GRAD_CHUNK)
        mu, trace = gnn_forward(X[sl], S[sl], policy.gnn)
        norm = np.sqrt(np.sum(mu * mu, axis=-1, keepdims=True))
        excess = np.maximum(norm / a_max - 1.0, 0.0)
        upstream = -2.0 * coeff / len(batch) * excess * mu / (a_max * np.maximum(norm, 1e-300))
        grad_H, _ = gnn_backward(trace, S[sl], policy.gnn, upstream)
        total[:-2] += grad_H.to_vector()
    return total


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


@dataclass
class ReportRow:
    iteration: int
    mean_return: float
    coverage: float
    collisions: float
    grad_norm: float
    seconds: float
    skipped: bool = False


def policy_gradient_step(batch: Sequence[EpisodeTrace], policy: GaussianPolicy, opt: AdamState,
                         params: TrainParams, gamma: float, iteration: int = 0,
                         a_max: Optional[float] = None):
    """One ascent step with the adaptive-moment rule; returns ``(policy, opt, row)``.

    ``a_max`` is needed only when ``params.bound_penalty`` is nonzero.
    """
    if not batch:
        raise ValueError("empty batch")
    grad = estimate_gradient(batch, policy, gamma, params.baseline, params.literal_estimator,
                             params.group_size)
    if params.bound_penalty:
        if a_max is None:
            raise ValueError("bound_penalty needs a_max")
        grad = grad + bound_gradient(batch, policy, a_max, params.bound_penalty)
    norm = float(np.sqrt(np.sum(grad * grad)))
    row = ReportRow(
        iteration=iteration,
        mean_return=float(np.mean([tr.total_return for tr in batch])),
        coverage=float(np.mean([tr.final_coverage for tr in batch])),
        collisions=float(np.mean([np.sum(tr.collisions) for tr in batch])),
        grad_norm=norm,
        seconds=0.0,
    )
    if not np.isfinite(norm):
        log.warning("iteration %d: non-finite gradient, update skipped", iteration)
        row.skipped = True
        return policy, opt, row
    if norm > params.grad_clip:
        grad = grad * (params.grad_clip / norm)
    t = opt.t + 1
    m = params.beta1 * opt.m + (1 - params.beta1) * grad
    v = params.beta2 * opt.v + (1 - params.beta2) * grad * grad
    m_hat = m / (1 - params.beta1 ** t)
    v_hat = v / (1 - params.beta2 ** t)
    vec = policy.to_vector() + params.step_size * m_hat / (np.sqrt(v_hat) + params.adam_eps)
    return policy.from_vector(vec), AdamState(m, v, t), row


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    policy: GaussianPolicy
    best_policy: GaussianPolicy
    reports: List[ReportRow] = field(default_factory=list)
    wallclock: List[float] = field(default_factory=list)
    converged_at: Optional[int] = None


def initial_policy(config: RunConfig) -> GaussianPolicy:
    return GaussianPolicy.init(config.layer_widths, config.K, config.a_max,
                               seeded_rng(config.seed, _INIT))


def train(config: RunConfig, params: TrainParams,
          on_iteration: Optional[Callable[[ReportRow, GaussianPolicy], None]] = None,
          policy: Optional[GaussianPolicy] = None) -> TrainResult:
    """Collect ``batch_size`` episodes per iteration and take a policy-gradient step.

    Stops early once the mean end-of-episode coverage over the last
    ``stop_window`` iterations reaches ``stop_coverage`` (when > 0).
    """
    config.validate()
    params.validate()
    vo = vo_config_for(config, params) if params.vo_training else None
    penalty = params.vo_penalty if params.vo_training else 0.0
    policy = policy if policy is not None else initial_policy(config)
    opt = AdamState.zeros(policy.to_vector().size)
    best, best_return = policy.copy(), -np.inf
    result = TrainResult(policy, best)
    start = time.perf_counter()
    simulated = 0.0
    for it in range(params.iterations):
        worlds = None
        if params.group_size > 1:
            # one start state per group; the action noise stays per episode
            worlds = [spawn(config, seeded_rng(config.seed, _START, it, j))
                      for j in range(params.batch_size // params.group_size)
                      for _ in range(params.group_size)]
        batch = collect_batch(policy, config, (_TRAIN, it), params.batch_size, vo, penalty,
                              params.threads, worlds)
        simulated += config.dt * sum(tr.length for tr in batch)
        new_policy, opt, row = policy_gradient_step(batch, policy, opt, params, config.gamma, it,
                                                   config.a_max)
        row.seconds = simulated
        if row.mean_return > best_return:
            best, best_return = policy.copy(), row.mean_return
        policy = new_policy
        result.reports.append(row)
        result.wallclock.append(time.perf_counter() - start)
        if on_iteration is not None:
            on_iteration(row, policy)
        if params.stop_coverage > 0 and len(result.reports) >= params.stop_window:
            recent = np.mean([r.coverage for r in result.reports[-params.stop_window:]])
            if recent >= params.stop_coverage:
                result.converged_at = it
                break
    result.policy, result.best_policy = policy, best
    return result


# -- evaluation ---------------------------------------------------------------------

@dataclass
class EvalMetrics:
    success_rate: float
    strict_success_rate: float
    mean_time: Optional[float]
    collisions: int
    mean_coverage: float
    episodes: List[EpisodeTrace]

    def summary(self) -> dict:
        return {
            "episodes": len(self.episodes),
            "success_rate": self.success_rate,
            "strict_success_rate": self.strict_success_rate,
            "mean_time": self.mean_time,
            "collisions": self.collisions,
            "mean_coverage": self.mean_coverage,
        }


def check_widths(policy: GaussianPolicy, config: RunConfig) -> None:
    if tuple(policy.gnn.widths) != tuple(config.layer_widths):
        raise WidthMismatchError(
            f"checkpoint widths {policy.gnn.widths} do not match the evaluation config "
            f"{tuple(config.layer_widths)}; sensing counts must equal those used in training")
    if policy.gnn.K != config.K:
        raise WidthMismatchError(f"checkpoint has K={policy.gnn.K}, config K={config.K}")


def transfer_eval(policy: GaussianPolicy, eval_config: RunConfig, episodes: int,
                  worlds: Optional[Sequence[WorldState]] = None,
                  vo: Optional[VOConfig] = None, timing: Optional[list] = None) -> EvalMetrics:
    """Run the frozen policy (std at its floor) on ``episodes`` instances of ``eval_config``.

    ``worlds`` overrides random spawning (e.g. formations); success means full
    coverage before the horizon, strict success additionally no collisions.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    eval_config.validate(allow_sparse=True)
    check_widths(policy, eval_config)
    if worlds is not None:
        worlds = list(worlds)[:episodes]
    batch = collect_batch(policy.frozen(), eval_config, (_EVAL,), episodes, vo=vo, worlds=worlds,
                          timing=timing)
    times = [tr.length * eval_config.dt for tr in batch if tr.success]
    return EvalMetrics(
        success_rate=float(np.mean([tr.success for tr in batch])),
        strict_success_rate=float(np.mean([tr.success and not np.any(tr.collisions) for tr in batch])),
        mean_time=float(np.mean(times)) if times else None,
        collisions=int(sum(int(np.sum(tr.collisions)) for tr in batch)),
        mean_coverage=float(np.mean([tr.final_coverage for tr in batch])),
        episodes=batch,
    )

"""Gaussian per-robot policy head on top of the GNN."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .gnn import FilterTensor, ForwardTrace, ShapeError, gnn_backward, gnn_forward

STD_MIN = 1e-3
STD_MAX = 10.0
LOG_2PI = np.log(2.0 * np.pi)
_LOG_STD_TAG = b"LSTD"


@dataclass
class GaussianPolicy:
    gnn: FilterTensor
    log_std: np.ndarray

    def __post_init__(self):
        self.log_std = np.asarray(self.log_std, dtype=np.float64).reshape(2)

    @classmethod
    def init(cls, widths, K: int, a_max: float, rng: np.random.Generator) -> "GaussianPolicy":
        """Output layer scaled by ``a_max`` so initial means live on the action scale."""
        return cls(FilterTensor.init(widths, K, rng, output_scale=a_max),
                   np.full(2, np.log(0.5 * a_max)))

    @property
    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, np.log(STD_MIN), np.log(STD_MAX)))

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.gnn.copy(), self.log_std.copy())

    def frozen(self) -> "GaussianPolicy":
        """Same means, exploration noise at the floor."""
        return GaussianPolicy(self.gnn, np.full(2, np.log(STD_MIN)))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.gnn.to_vector(), self.log_std])

    def from_vector(self, vec: np.ndarray) -> "GaussianPolicy":
        return GaussianPolicy(self.gnn.from_vector(vec[:-2]), vec[-2:].copy())

    # -- checkpoint: filter container followed by a log_std record -------------

    def to_bytes(self) -> bytes:
        return self.gnn.to_bytes() + _LOG_STD_TAG + struct.pack("<2d", *self.log_std)

    @classmethod
    def from_bytes(cls, data: bytes) -> "GaussianPolicy":
        buf = io.BytesIO(data)
        gnn = FilterTensor.read(buf)
        tail = buf.read()
        if len(tail) != 4 + 16 or tail[:4] != _LOG_STD_TAG:
            raise ShapeError("checkpoint lacks a log_std record")
        return cls(gnn, np.array(struct.unpack("<2d", tail[4:])))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GaussianPolicy":
        return cls.from_bytes(Path(path).read_bytes())


def gaussian_log_prob(actions: np.ndarray, mu: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Per-robot log density of a diagonal Gaussian over the last axis."""
    z = (actions - mu) / std
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(std)) - 0.5 * mu.shape[-1] * LOG_2PI


def policy_mean(X, S, policy: GaussianPolicy):
    mu, trace = gnn_forward(X, S, policy.gnn)
    if not np.all(np.isfinite(mu)):
        raise FloatingPointError("policy mean is not finite")
    return mu, trace


def act(X, S, policy: GaussianPolicy, rng: Optional[np.random.Generator] = None,
        noise: Optional[np.ndarray] = None):
    """Sample ``a_n ~ Normal(mu_n, diag(std^2))`` independently per robot.

    Pass either ``rng`` or pre-drawn standard normal ``noise`` shaped like the
    means. Returns ``(actions, log_probs, trace)``; the joint log-probability is
    ``log_probs.sum(-1)``.
    """
    mu, trace = policy_mean(X, S, policy)
    if noise is None:
        if rng is None:
            raise ValueError("act needs an rng or pre-drawn noise")
        noise = rng.standard_normal(mu.shape)
    actions = mu + policy.std * noise
    return actions, gaussian_log_prob(actions, mu, policy.std), trace


def log_prob_grad(trace: ForwardTrace, S, actions: np.ndarray, policy: GaussianPolicy,
                  weights: Optional[np.ndarray] = None):
    """Gradient of ``sum(weights * log_probs)`` w.r.t. the filter tensor and ``log_std``.

    ``weights`` broadcasts against the per-robot log-probs (batch axes plus the
    robot axis); omitted it means a plain sum. Returns ``(grad_H, grad_log_std)``.
    """
    mu = trace.post[-1]
    if actions.shape != mu.shape:
        raise ShapeError(f"actions {actions.shape} do not match trace output {mu.shape}")
    std = policy.std
    diff = actions - mu
    w = np.ones(mu.shape[:-1]) if weights is None else np.broadcast_to(weights, mu.shape[:-1])
    upstream = w[..., None] * diff / std ** 2
    grad_H, _ = gnn_backward(trace, S, policy.gnn, upstream)
    per_coord = w[..., None] * (diff ** 2 / std ** 2 - 1.0)
    grad_log_std = per_coord.reshape(-1, mu.shape[-1]).sum(axis=0)
    clamped = (policy.log_std < np.log(STD_MIN)) | (policy.log_std > np.log(STD_MAX))
    grad_log_std = np.where(clamped, 0.0, grad_log_std)
    return grad_H, grad_log_std

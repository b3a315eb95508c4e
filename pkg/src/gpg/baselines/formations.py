"""Structured start/goal layouts: line_to_circle, line_to_line, grid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import ConfigError, WorldState, seeded_rng

KINDS = ("line_to_circle", "line_to_line", "grid")


@dataclass(frozen=True)
class FormationSpec:
    kind: str
    param: float
    spacing: float = 0.3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError("formation", f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if not self.param > 0:
            raise ConfigError("formation", f"{self.kind} parameter must be > 0")
        if not self.spacing > 0:
            raise ConfigError("formation", "spacing must be > 0")

    @classmethod
    def parse(cls, text: str, spacing: float = 0.3) -> "FormationSpec":
        """``kind:param`` e.g. ``line_to_circle:2.5``."""
        kind, sep, value = text.strip().partition(":")
        if not sep:
            raise ConfigError("formation", f"expected kind:param, got {text!r}")
        try:
            param = float(value)
        except ValueError:
            raise ConfigError("formation", f"bad parameter in {text!r}") from None
        return cls(kind.strip(), param, spacing)

    def __str__(self):
        return f"{self.kind}:{self.param:g}"


def _robot_line(n, spacing, rng, y=0.0):
    x = spacing * (np.arange(n) - (n - 1) / 2)
    jitter = rng.uniform(-0.15 * spacing, 0.15 * spacing, size=(n, 2))
    return np.stack([x, np.full(n, y)], axis=-1) + jitter


def make_formation(spec: FormationSpec, n: int, seed: int) -> WorldState:
    """Instance ``seed`` of a formation; the seed jitters robots and rotates/offsets goals.

    * ``line_to_circle(radius)``: robots on a line through the centre, goals evenly on
      a circle of that radius.
    * ``line_to_line(gap)``: goals on a parallel line ``gap`` away, shifted sideways.
    * ``grid(spacing)``: goals on a square grid with that pitch, robots on a line below it.
    """
    rng = seeded_rng(seed, 0xF0)
    s = spec.spacing
    if spec.kind == "line_to_circle":
        robots = _robot_line(n, s, rng)
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + 2 * np.pi * np.arange(n) / n
        goals = spec.param * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    elif spec.kind == "line_to_line":
        robots = _robot_line(n, s, rng)
        shift = rng.uniform(-0.5, 0.5) * s * n / 2
        goals = np.stack([s * (np.arange(n) - (n - 1) / 2) + shift, np.full(n, spec.param)], axis=-1)
    else:
        side = math.ceil(math.sqrt(n))
        idx = np.arange(n)
        g = spec.param
        goals = np.stack([(idx % side - (side - 1) / 2) * g, (idx // side - (side - 1) / 2) * g], axis=-1)
        robots = _robot_line(n, s, rng, y=-(side - 1) / 2 * g - 2 * g)
    return WorldState(robots, goals)


def check_inside(worlds, half_width: float) -> None:
    """Formation worlds must sit strictly inside the arena, or the wall would stop robots."""
    for w in worlds:
        extent = max(np.max(np.abs(w.robot_positions)), np.max(np.abs(w.goal_positions)))
        if extent >= half_width:
            raise ConfigError("arena_half_width",
                              f"formation reaches {extent:.3g} m; must be < {half_width:g}")

"""Flat ``key = value`` experiment configs.

``#`` starts a comment, blank lines are ignored, unknown keys are errors and
every error names the line it came from.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .baselines.formations import FormationSpec
from .core import ConfigError, RunConfig
from .training import TrainParams


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    train: TrainParams = field(default_factory=TrainParams)
    out_dir: str = ""
    eval_episodes: int = 50
    formation: str = ""
    formations: Tuple[str, ...] = ()
    formation_spacing: float = 0.3
    compare_runs: int = 20
    sweep_K: Tuple[int, ...] = ()
    sweep_M: Tuple[int, ...] = ()
    sweep_eval_runs: int = 100
    lines: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def formation_spec(self) -> Optional[FormationSpec]:
        if not self.formation:
            return None
        return FormationSpec.parse(self.formation, self.formation_spacing)

    def formation_specs(self) -> List[FormationSpec]:
        return [FormationSpec.parse(f, self.formation_spacing) for f in self.formations]


_EXPERIMENT_KEYS = [f.name for f in dataclasses.fields(ExperimentConfig)
                    if f.name not in ("run", "train", "lines")]
_RUN_KEYS = [f.name for f in dataclasses.fields(RunConfig)]
_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainParams)]

_TYPES: Dict[str, str] = {
    "layer_widths": "ints", "sweep_K": "ints", "sweep_M": "ints", "formations": "strs",
    "robot_radius": "optfloat", "sense_range": "optfloat",
}


def _kind(owner, name: str) -> str:
    if name in _TYPES:
        return _TYPES[name]
    default = getattr(owner, name)
    if isinstance(default, bool):
        return "bool"
    if isinstance(default, int):
        return "int"
    if isinstance(default, float):
        return "float"
    return "str"


def _convert(kind: str, raw: str, key: str, line: int):
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if kind == "int":
            return int(raw, 0)
        if kind in ("float", "optfloat"):
            if kind == "optfloat" and raw.lower() in ("", "auto"):
                return None
            return float(raw)
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "strs":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind}", line) from None


def parse_config(text: str) -> ExperimentConfig:
    run_vals, train_vals, exp_vals = {}, {}, {}
    lines: Dict[str, int] = {}
    defaults = (RunConfig(), TrainParams(), ExperimentConfig())
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        content = raw_line.split("#", 1)[0].strip()
        if not content:
            continue
        key, sep, value = content.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(key or "?", "expected 'key = value'", lineno)
        if key in lines:
            raise ConfigError(key, f"duplicate key (first set on line {lines[key]})", lineno)
        lines[key] = lineno
        if key in _RUN_KEYS:
            run_vals[key] = _convert(_kind(defaults[0], key), value, key, lineno)
        elif key in _TRAIN_KEYS:
            train_vals[key] = _convert(_kind(defaults[1], key), value, key, lineno)
        elif key in _EXPERIMENT_KEYS:
            exp_vals[key] = _convert(_kind(defaults[2], key), value, key, lineno)
        else:
            raise ConfigError(key, "unknown key", lineno)
    try:
        run = RunConfig(**run_vals)
        run.validate(allow_sparse=True)
        train = TrainParams(**train_vals).validate()
        exp = ExperimentConfig(run=run, train=train, lines=lines, **exp_vals)
        _validate_experiment(exp)
    except ConfigError as err:
        raise anchored(err, lines) from None
    return exp


def anchored(err: ConfigError, lines: Dict[str, int]) -> ConfigError:
    """Copy of ``err`` pointing at the line that set the offending key."""
    message = str(err).split(f"{err.field}: ", 1)[-1]
    return ConfigError(err.field, message, lines.get(err.field, err.line))


def validate_for_training(exp: ExperimentConfig) -> ExperimentConfig:
    """Strict checks (sensing counts within the swarm size), line-anchored."""
    try:
        exp.run.validate()
    except ConfigError as err:
        raise anchored(err, exp.lines) from None
    return exp


def _validate_experiment(exp: ExperimentConfig) -> None:
    if exp.eval_episodes < 0:
        raise ConfigError("eval_episodes", "must be >= 0")
    if exp.compare_runs < 1:
        raise ConfigError("compare_runs", "must be >= 1")
    if exp.sweep_eval_runs < 1:
        raise ConfigError("sweep_eval_runs", "must be >= 1")
    if exp.formation:
        exp.formation_spec()
    exp.formation_specs()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError("config", f"cannot read {path}: {err.strerror}") from None
    return parse_config(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(exp: ExperimentConfig) -> str:
    """Every key with its resolved value, so the snapshot re-runs identically."""
    out = ["# resolved configuration (all defaults materialized)"]
    for section, owner, keys in (("run", exp.run, _RUN_KEYS), ("train", exp.train, _TRAIN_KEYS),
                                 ("experiment", exp, _EXPERIMENT_KEYS)):
        out.append(f"# -- {section}")
        out.extend(f"{k} = {_format(getattr(owner, k))}" for k in keys)
    return "\n".join(out) + "\n"

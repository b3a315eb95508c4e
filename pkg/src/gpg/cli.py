"""``gpg`` command line: train, eval, transfer, compare, sweep, render.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .baselines.formations import check_inside, make_formation
from .config import ExperimentConfig, dump_config, load_config, validate_for_training
from .core import ConfigError
from .gnn import ShapeError
from .policy import GaussianPolicy
from .training import (ReportRow, WidthMismatchError, check_widths, train, transfer_eval,
                       vo_config_for)

COMMANDS = ("train", "eval", "transfer", "compare", "sweep", "render")
TRAIN_COLUMNS = ("iteration", "mean_return", "coverage", "collisions", "grad_norm", "seconds")
RENDER_COLUMNS = ("t", "entity_kind", "id", "x", "y")


class UsageError(Exception):
    """Bad invocation or input file; maps to exit code 2."""


def _num(x: float) -> str:
    return repr(float(x))


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args, exp: Optional[ExperimentConfig]) -> Path:
    if args.out:
        out = Path(args.out)
    elif exp is not None and exp.out_dir:
        out = Path(exp.out_dir)
    else:
        out = Path(os.environ.get("GPG_OUT", "gpg_out")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_experiment(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError(f"{args.command} needs --config PATH")
    exp = load_config(args.config)
    if args.seed is not None:
        exp.run = exp.run.replace(seed=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        exp.train.threads = args.threads
    return exp


def _load_checkpoint(args) -> GaussianPolicy:
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint PATH")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    try:
        return GaussianPolicy.load(path)
    except ShapeError as err:
        raise UsageError(f"checkpoint {path}: {err}") from None


def _report_line(row: ReportRow) -> List[str]:
    return [str(row.iteration), _num(row.mean_return), _num(row.coverage), _num(row.collisions),
            _num(row.grad_norm), _num(row.seconds)]


# -- commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    exp = validate_for_training(_load_experiment(args))
    out = _out_dir(args, exp)
    (out / "resolved.cfg").write_text(dump_config(exp))
    with open(out / "train.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAIN_COLUMNS)

        def stream(row, policy):
            writer.writerow(_report_line(row))
            fh.flush()

        result = train(exp.run, exp.train, on_iteration=stream)
    result.policy.save(out / "final.ckpt")
    result.best_policy.save(out / "best.ckpt")
    print(f"trained {len(result.reports)} iterations; checkpoints in {out}")
    return 0


def _episode_count(exp: ExperimentConfig) -> int:
    if exp.eval_episodes < 1:
        raise UsageError("eval_episodes must be >= 1 for evaluation")
    return exp.eval_episodes


def _evaluate(args, name: str) -> int:
    exp = _load_experiment(args)
    policy = _load_checkpoint(args)
    episodes = _episode_count(exp)
    check_widths(policy, exp.run)
    spec = exp.formation_spec()
    worlds = None
    if spec is not None:
        worlds = [make_formation(spec, exp.run.n_robots, exp.run.seed + i) for i in range(episodes)]
        check_inside(worlds, exp.run.arena_half_width)
    metrics = transfer_eval(policy, exp.run, episodes, worlds=worlds)
    out = _out_dir(args, exp)
    summary = metrics.summary()
    summary["n_robots"] = exp.run.n_robots
    summary["formation"] = str(spec) if spec is not None else "random"
    _dump_json(summary, out / f"{name}_metrics.json")
    traj = out / "trajectories"
    traj.mkdir(exist_ok=True)
    for i, tr in enumerate(metrics.episodes):
        _dump_json(tr.to_json(exp.run.dt), traj / f"episode_{i:03d}.json")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    return _evaluate(args, "eval")


def cmd_transfer(args) -> int:
    return _evaluate(args, "transfer")


def cmd_compare(args) -> int:
    from .baselines.compare import METHODS, compare_run

    exp = _load_experiment(args)
    policy = _load_checkpoint(args)
    specs = exp.formation_specs()
    if not specs:
        raise UsageError("compare needs at least one entry in 'formations'")
    check_widths(policy, exp.run)
    vo = vo_config_for(exp.run, exp.train)
    out = _out_dir(args, exp)
    rows, timing = [], {}
    for spec in specs:
        comp = compare_run(policy, spec, exp.run, exp.compare_runs, vo)
        rows.append(comp.row())
        timing[str(spec)] = {m: float(np.mean(comp.methods[m].planning)) for m in METHODS}
    cols = ["formation"] + [f"{m}_{q}" for m in METHODS for q in ("T", "C")]
    std_cols = ["formation"] + [f"{m}_{q}_std" for m in METHODS for q in ("T", "C")]
    for name, columns in (("table1.csv", cols), ("table1_std.csv", std_cols)):
        with open(out / name, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([row[c] if c == "formation" else _num(row[c]) for c in columns])
    # wall-clock measurements vary run to run, so they live outside the reproducible outputs
    (out / "planning_times.txt").write_text(
        "".join(f"{f} {m} {timing[f][m]:.6e}\n" for f in timing for m in METHODS))
    print((out / "table1.csv").read_text(), end="")
    return 0


def cmd_sweep(args) -> int:
    exp = _load_experiment(args)
    Ks = list(args.K_list or exp.sweep_K)
    Ms = list(args.M_list or exp.sweep_M)
    if not Ks or not Ms:
        raise UsageError("sweep needs nonempty K and M lists (sweep_K / sweep_M or --K-list / --M-list)")
    out = _out_dir(args, exp)
    (out / "resolved.cfg").write_text(dump_config(exp))
    n = exp.run.n_robots
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("K", "M", "success_pct", "mean_coverage"))
        fh.flush()
        for K in Ks:
            for M in Ms:
                run = exp.run.replace(K=K, M_robots=min(M, n - 1), M_goals=min(M, n)).validate()
                result = train(run, exp.train)
                result.policy.save(out / f"K{K}_M{M}.ckpt")
                metrics = transfer_eval(result.policy, run, exp.sweep_eval_runs)
                writer.writerow((K, M, _num(100.0 * metrics.strict_success_rate),
                                 _num(metrics.mean_coverage)))
                fh.flush()
    print((out / "sweep.csv").read_text(), end="")
    return 0


def render_rows(doc: dict) -> List[list]:
    """Long-format rows ``(t, entity_kind, id, x, y)`` from a trajectory document."""
    try:
        dt = float(doc["dt"])
        robots = np.asarray(doc["robots"], dtype=np.float64)
        goals = np.asarray(doc["goals"], dtype=np.float64)
        obstacles = np.asarray(doc.get("obstacles", []), dtype=np.float64)
    except (KeyError, TypeError, ValueError) as err:
        raise UsageError(f"malformed trajectory: {err}") from None
    if robots.size == 0:
        return []
    if robots.ndim != 3 or robots.shape[-1] != 2 or goals.ndim != 2 or goals.shape[-1] != 2:
        raise UsageError("malformed trajectory: robots must be (T+1, N, 2) and goals (N, 2)")
    rows = []
    for k, frame in enumerate(robots):
        rows.extend([_num(k * dt), "robot", i, _num(x), _num(y)] for i, (x, y) in enumerate(frame))
    rows.extend([_num(0.0), "goal", i, _num(x), _num(y)] for i, (x, y) in enumerate(goals))
    if obstacles.size:
        rows.extend([_num(0.0), "obstacle", i, _num(x), _num(y)]
                    for i, (x, y) in enumerate(obstacles.reshape(-1, 2)))
    return rows


def render_csv(doc: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RENDER_COLUMNS)
    writer.writerows(render_rows(doc))
    return buf.getvalue()


def parse_render_csv(text: str) -> dict:
    """Inverse of ``render_csv``: back to a trajectory document."""
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != RENDER_COLUMNS:
        raise UsageError("not a rendered trajectory CSV")
    frames, goals, obstacles, times = {}, {}, {}, set()
    for row in reader:
        t, kind, i = float(row["t"]), row["entity_kind"], int(row["id"])
        p = [float(row["x"]), float(row["y"])]
        if kind == "robot":
            frames.setdefault(t, {})[i] = p
            times.add(t)
        elif kind == "goal":
            goals[i] = p
        else:
            obstacles[i] = p
    ts = sorted(times)
    dt = ts[1] - ts[0] if len(ts) > 1 else 0.0
    return {"dt": dt,
            "robots": [[frames[t][i] for i in sorted(frames[t])] for t in ts],
            "goals": [goals[i] for i in sorted(goals)],
            "obstacles": [obstacles[i] for i in sorted(obstacles)]}


def cmd_render(args) -> int:
    source = args.trajectory or args.config
    if not source:
        raise UsageError("render needs --trajectory PATH")
    path = Path(source)
    try:
        doc = json.loads(path.read_text())
    except OSError as err:
        raise UsageError(f"cannot read {path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"malformed trajectory {path}: {err}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"malformed trajectory {path}: expected an object")
    text = render_csv(doc)
    out = _out_dir(args, None)
    (out / f"{path.stem}.csv").write_text(text)
    return 0


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpg", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="experiment config (key = value)")
    parser.add_argument("--checkpoint", help="policy checkpoint for eval/transfer/compare")
    parser.add_argument("--out", help="output directory (default $GPG_OUT/<command>)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--threads", type=int, help="rollout worker cap")
    parser.add_argument("--trajectory", help="trajectory JSON for render")
    parser.add_argument("--K-list", dest="K_list", type=lambda s: [int(x) for x in s.split(",")],
                        help="comma-separated K values for sweep")
    parser.add_argument("--M-list", dest="M_list", type=lambda s: [int(x) for x in s.split(",")],
                        help="comma-separated M values for sweep")
    return parser


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "transfer": cmd_transfer,
            "compare": cmd_compare, "sweep": cmd_sweep, "render": cmd_render}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        return HANDLERS[args.command](args)
    except (ConfigError, UsageError, WidthMismatchError) as err:
        print(f"gpg {args.command}: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"gpg {args.command}: failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

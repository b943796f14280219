"""Batch command-line front end.

Subcommands: plan (one planning cycle -> CSV + SVG), train (PPO loop),
eval (checkpoint -> per-scenario report), plot (metrics/trace CSV -> SVGs).

Exit codes: 0 success, 2 usage/config/file error, 3 no feasible plan.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import (CorruptCheckpoint, InvalidInput, MhhtofError,
                     NoFeasiblePlan, ScenarioValidationError)
from .evaluation import COST_TERM_NAMES, WeightVector
from .neural import SequenceNet
from .ppo import (TrainConfig, apply_action_to_weights, load_checkpoint,
                  train)
from .simenv import Episode, Planner, load_scenario
from .svgplot import line_plot, stacked_plot

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3

CONFIG_SCHEMA = "mhhtof-config/1"
PLAN_HEADER = "t,x,y,s,d,v,a,kappa," + ",".join(COST_TERM_NAMES)
EVAL_HEADER = ("scenario,goal_reached,clusters,avg_ego_risk,avg_obs_risk,"
               "cum_cost,ep_len")

PLAN_DEFAULTS = {
    "weights": [1.0] * 7,
    "n1": 30,
    "horizons": [2.0, 3.0, 4.0, 5.0],
    "ref_ds": 0.5,
}
EVAL_DEFAULTS = {"action_scale": 0.05, "n1": 30}


class CliError(Exception):
    """Carries the process exit code alongside the message."""

    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliError(f"--set expects key=value, got {item!r}")
        out[key] = _coerce(value)
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise CliError(f"config {path} must be a JSON object")
    if data.get("schema") != CONFIG_SCHEMA:
        raise CliError(f"config {path} must declare schema {CONFIG_SCHEMA!r}")
    return {k: v for k, v in data.items() if k != "schema"}


def merge_config(defaults: dict, args, extra_keys=()) -> dict:
    """defaults <- config file <- --set overrides; unknown keys rejected."""
    cfg = dict(defaults)
    known = set(defaults) | set(extra_keys)
    for source, values in (("config file", _file_values(args)),
                          ("--set", parse_overrides(args.set))):
        for key, value in values.items():
            if key not in known:
                raise CliError(f"unknown {source} key {key!r}")
            cfg[key] = value
    return cfg


def _file_values(args) -> dict:
    if getattr(args, "config", None):
        return load_config_file(args.config)
    return {}


def _load_scenario(path):
    if path is None:
        raise CliError("--scenario is required")
    try:
        return load_scenario(path)
    except OSError as exc:
        raise CliError(f"cannot read scenario {path}: {exc}")
    except (ScenarioValidationError, json.JSONDecodeError) as exc:
        raise CliError(f"invalid scenario {path}: {exc}")


def _out_dir(args) -> str:
    out = args.out or "."
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}")
    return out


def _weight_vector(weights) -> WeightVector:
    try:
        return WeightVector(lam=np.asarray(weights, dtype=float))
    except (MhhtofError, ValueError) as exc:
        raise CliError(f"bad weights: {exc}")


def cmd_plan(args) -> int:
    scn = _load_scenario(_single_scenario(args))
    cfg = merge_config(PLAN_DEFAULTS, args)
    wv = _weight_vector(cfg["weights"])
    out = _out_dir(args)
    planner = Planner(scn, n1=int(cfg["n1"]), ref_ds=float(cfg["ref_ds"]),
                      horizons=tuple(float(h) for h in cfg["horizons"]))
    try:
        result = planner.plan(scn.ego_start, wv, step=0)
    except NoFeasiblePlan as exc:
        print(f"no feasible plan: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    cand = result.candidate
    f, c = cand.frenet, cand.cartesian
    terms = result.cost_vector.as_array()
    csv_path = os.path.join(out, "plan.csv")
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(PLAN_HEADER + "\n")
        for k in range(cand.n_samples):
            row = [cand.times[k], c["x"][k], c["y"][k], f["s"][k], f["d"][k],
                   c["v"][k], c["a"][k], c["kappa"][k], *terms]
            fh.write(",".join(f"{v:.8g}" for v in row) + "\n")
    svg_path = os.path.join(out, "plan.svg")
    with open(svg_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(stacked_plot([
            ([("path", c["x"], c["y"])], "planned path", "x [m]", "y [m]"),
            ([("v", cand.times, c["v"])], "speed profile", "t [s]", "v [m/s]"),
            ([("a", cand.times, c["a"])], "acceleration profile", "t [s]",
             "a [m/s^2]"),
        ]))
    print(f"wrote {csv_path} and {svg_path} "
          f"(weighted cost {result.weighted:.6g})")
    return EXIT_OK


def _single_scenario(args):
    paths = args.scenario or []
    if len(paths) != 1:
        raise CliError("expected exactly one --scenario")
    return paths[0]


def _thread_cap() -> int | None:
    raw = os.environ.get("MHHTOF_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise CliError(f"MHHTOF_THREADS must be an integer, got {raw!r}")
    if cap <= 0:
        raise CliError("MHHTOF_THREADS must be positive")
    return cap


def build_train_config(args) -> TrainConfig:
    defaults = TrainConfig().to_dict()
    cfg = merge_config(defaults, args)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cap = _thread_cap()
    if cap is not None:
        cfg["n_envs"] = min(int(cfg["n_envs"]), cap)
    try:
        return TrainConfig(**cfg)
    except (TypeError, InvalidInput) as exc:
        raise CliError(f"bad training config: {exc}")


def cmd_train(args) -> int:
    if not args.scenario:
        raise CliError("train requires at least one --scenario")
    scenarios = [_load_scenario(p) for p in args.scenario]
    config = build_train_config(args)
    out = _out_dir(args)
    best, metrics_path = train(config, scenarios, out)
    print(f"best_reward={_best_reward(metrics_path):.8g} "
          f"steps_to_best={best.train_step} metrics={metrics_path}")
    return EXIT_OK


def _best_reward(metrics_path) -> float:
    best = float("-inf")
    with open(metrics_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("step,"):
                continue
            parts = line.strip().split(",")
            if len(parts) > 1:
                best = max(best, float(parts[1]))
    return best


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise CliError("eval requires --checkpoint")
    if not args.scenario:
        raise CliError("eval requires at least one --scenario")
    cfg = merge_config(EVAL_DEFAULTS, args)
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {args.checkpoint}: {exc}")
    except CorruptCheckpoint as exc:
        raise CliError(f"corrupt checkpoint {args.checkpoint}: {exc}")
    if ckpt.config_mismatch:
        raise CliError("checkpoint config hash does not match")
    pnet = SequenceNet(ckpt.policy_spec, with_log_std=True)
    out = _out_dir(args)
    report_path = os.path.join(out, "report.csv")
    rows = []
    for path in args.scenario:
        scn = _load_scenario(path)
        rows.append(_eval_episode(path, scn, pnet, ckpt.policy_params,
                                  float(cfg["action_scale"]),
                                  int(cfg["n1"]), out))
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(EVAL_HEADER + "\n")
        for row in rows:
            fh.write(row + "\n")
    print(f"wrote {report_path}")
    return EXIT_OK


def _eval_episode(path, scn, pnet, pparams, action_scale, n1, out) -> str:
    episode = Episode(scn, n1=n1)
    obs = episode.reset()
    carry = pnet.zero_carry()
    wv = WeightVector()
    clusters, ego_risks, obs_risks, deltas = [], [], [], []
    cum_cost = 0.0
    while not episode.done:
        mean_seq, carry, _ = pnet.forward(pparams, obs[None, :], carry)
        prev = wv.lam
        wv = apply_action_to_weights(wv, action_scale * mean_seq[0])
        deltas.append(float(np.sum(np.abs(wv.lam - prev))))
        obs, _, _, info = episode.step_with_weights(wv)
        clusters.append(info["summary"].n_total)
        cum_cost += info["weighted_cost"]
        ego_risks.append(info["risk"].ego_risk)
        obs_risks.append(info["risk"].obstacle_risk)
    stem = os.path.splitext(os.path.basename(path))[0]
    actions_path = os.path.join(out, f"{stem}_actions.csv")
    with open(actions_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,action_delta\n")
        for k, d in enumerate(deltas, start=1):
            fh.write(f"{k},{d:.9f}\n")
    goal = 1 if episode.cause == "success" else 0
    vals = (float(np.mean(clusters)) if clusters else 0.0,
            float(np.mean(ego_risks)) if ego_risks else 0.0,
            float(np.mean(obs_risks)) if obs_risks else 0.0,
            cum_cost)
    return (f"{stem},{goal}," + ",".join(f"{v:.8g}" for v in vals)
            + f",{episode.step_count}")


def _read_csv(path):
    """Returns (columns, rows of raw strings); structural errors -> CliError."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}")
    lineno = 0
    if lines and lines[0].startswith("#"):
        lineno = 1
    if lineno >= len(lines) or not lines[lineno].strip():
        raise CliError(f"{path}: missing header at line {lineno + 1}")
    columns = lines[lineno].split(",")
    rows = []
    for k in range(lineno + 1, len(lines)):
        if not lines[k].strip():
            continue
        parts = lines[k].split(",")
        if len(parts) != len(columns):
            raise CliError(f"{path}: line {k + 1} has {len(parts)} fields, "
                           f"expected {len(columns)}")
        rows.append((k + 1, parts))
    if not rows:
        raise CliError(f"{path}: no data rows after line {lineno + 1}")
    return columns, rows


def _column(path, columns, rows, name):
    idx = columns.index(name)
    vals = []
    for lineno, parts in rows:
        try:
            vals.append(float(parts[idx]))
        except ValueError:
            raise CliError(f"{path}: line {lineno}: {name}={parts[idx]!r} "
                           "is not a number")
    return np.asarray(vals)


def cmd_plot(args) -> int:
    path = _single_scenario(args)
    out = _out_dir(args)
    columns, rows = _read_csv(path)
    if "step" not in columns:
        raise CliError(f"{path}: need a 'step' column")
    steps = _column(path, columns, rows, "step")
    emitted = []

    def emit(fname, ys, title, ylabel):
        target = os.path.join(out, fname)
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(line_plot([(ylabel, steps, ys)], title, "steps", ylabel))
        emitted.append(target)

    if "mean_reward" in columns:
        emit("reward_vs_steps.svg",
             _column(path, columns, rows, "mean_reward"),
             "mean evaluation reward", "mean_reward")
    if "mean_ep_len" in columns:
        emit("ep_len_vs_steps.svg",
             _column(path, columns, rows, "mean_ep_len"),
             "mean episode length", "mean_ep_len")
    for name in ("mean_cost", "cost"):
        if name in columns:
            emit("cumulative_cost.svg",
                 np.cumsum(_column(path, columns, rows, name)),
                 "cumulative weighted cost", "cum_cost")
            break
    if "action_delta" in columns:
        emit("cumulative_action_delta.svg",
             np.cumsum(_column(path, columns, rows, "action_delta")),
             "cumulative action delta", "cum_action_delta")
    if not emitted:
        raise CliError(f"{path}: no plottable columns found")
    print("wrote " + " ".join(emitted))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mhhtof",
        description="Trajectory planning and weight-adaptation training.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("plan", cmd_plan), ("train", cmd_train),
                     ("eval", cmd_eval), ("plot", cmd_plot)):
        p = sub.add_parser(name)
        p.add_argument("--scenario", action="append", metavar="PATH",
                       help="scenario JSON (plan/train/eval) or input CSV (plot);"
                            " repeatable for train/eval")
        p.add_argument("--config", metavar="PATH",
                       help=f"JSON config with schema {CONFIG_SCHEMA}")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")
        if name == "eval":
            p.add_argument("--checkpoint", metavar="PATH",
                           help="trained checkpoint to evaluate")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NoFeasiblePlan as exc:
        print(f"no feasible plan: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except MhhtofError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

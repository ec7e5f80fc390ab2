"""Command-line entry point.

One JSON config file drives everything; `CLOOP_`-prefixed environment
variables override individual fields for scripted sweeps. Subcommands cover
training, single closed-loop rollouts, benchmark sweeps over scheduler
settings, open-loop prediction evaluation, and dataset generation. Every run
drops a resolved config snapshot next to its outputs so results are
reproducible from the artifact directory alone.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import glob
import itertools
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig
from .decoder import DecoderConfig
from .framework import NeuralModel, SchedulerConfig, split_ev_modes, write_event_log
from .metrics import (
    MetricReport,
    conditional_ade,
    evaluate_log,
    reference_from_scenario,
    write_reports_csv,
)
from .scenario import TEMPLATES, Scenario, generate_scenario, load_scenario, save_scenario
from .simulator import (
    STEP_DT,
    ClosedLoopPlanner,
    HeuristicModel,
    IdmParams,
    OraclePlanner,
    run_closed_loop,
    write_simlog,
)
from .tensor import ParamStore
from .training import LossConfig, scenario_stream, train


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "scheduler": SchedulerConfig,
    "backbone": BackboneConfig,
    "decoder": DecoderConfig,
    "loss": LossConfig,
    "idm": IdmParams,
}

ENV_PREFIX = "CLOOP_"


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs, resolved and cross-validated."""

    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    idm: IdmParams = field(default_factory=IdmParams)
    sim_step: float = STEP_DT
    duration: float = 5.0
    templates: tuple = TEMPLATES
    seeds: tuple = (0, 1, 2, 3)
    weights: str | None = None
    output_dir: str = "runs"
    epochs: int = 1
    lr: float = 1e-2
    momentum: float = 0.9
    clip_norm: float = 1.0
    train_seed: int = 0
    train_horizon: int | None = None

    def __post_init__(self):
        if self.sim_step <= 0 or self.duration <= 0:
            raise ConfigError("sim_step and duration must be positive")
        if abs(self.sim_step - self.scheduler.monitor_period) > 1e-9:
            raise ConfigError(
                f"sim_step {self.sim_step} must equal the scheduler's "
                f"monitor_period {self.scheduler.monitor_period}")
        if not self.templates:
            raise ConfigError("templates must not be empty")
        for t in self.templates:
            if t not in TEMPLATES:
                raise ConfigError(f"unknown template {t!r}; choose from {TEMPLATES}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr and clip_norm must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.train_horizon is not None and self.train_horizon < 1:
            raise ConfigError("train_horizon must be >= 1 when set")

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["templates"] = list(self.templates)
        out["seeds"] = list(self.seeds)
        return out


def _parse_env_value(field_name: str, raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if "," in raw:
            return [_parse_env_value(field_name, part) for part in raw.split(",")]
        return raw


def _env_overrides(env) -> dict:
    """CLOOP_SECTION_FIELD=... or CLOOP_FIELD=... into a nested dict."""
    out: dict = {}
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        head = rest.split("_", 1)[0]
        if head in _SECTIONS and "_" in rest:
            section, field_name = rest.split("_", 1)
            out.setdefault(section, {})[field_name] = _parse_env_value(field_name, raw)
        else:
            out[rest] = _parse_env_value(rest, raw)
    return out


def _merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = _merge(merged[k], v)
        else:
            merged[k] = v
    return merged


def _build_section(cls, data: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {section} fields: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section} config: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = data.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"{name} must be a JSON object")
        kwargs[name] = _build_section(cls, section, name)
    top_fields = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    unknown = set(data) - top_fields
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for k in ("templates", "seeds"):
        if k in data:
            if not isinstance(data[k], (list, tuple)):
                data[k] = [data[k]]
            data[k] = tuple(data[k])
    kwargs.update(data)
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def load_run_config(path: str | None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
    return config_from_dict(_merge(data, _env_overrides(env)))


def _write_snapshot(config: RunConfig, out_dir: str, extra: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    snapshot = config.as_dict()
    if extra:
        snapshot["invocation"] = extra
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# Planner construction

def _load_model(config: RunConfig, weights: str | None):
    path = weights or config.weights
    if path is None:
        raise ConfigError("a weights path is required for the neural planner")
    if not os.path.exists(path):
        raise FileNotFoundError(f"weights file not found: {path}")
    return NeuralModel.from_checkpoint(path)


def build_planner(kind: str, config: RunConfig, scenario: Scenario,
                  prediction_type: str = "cmp", weights: str | None = None):
    if kind == "oracle":
        # lead_time 2.0: far enough ahead of the tracker's lag that the
        # executed trace keeps pace with the demonstration from the start
        return OraclePlanner(horizon_steps=config.decoder.horizon_steps,
                             step_dt=config.decoder.step_dt,
                             demonstration=reference_from_scenario(scenario),
                             lead_time=2.0)
    if kind == "heuristic":
        model = HeuristicModel(horizon_steps=config.decoder.horizon_steps,
                               step_dt=config.decoder.step_dt)
        return ClosedLoopPlanner(model, config.scheduler, prediction_type)
    if kind == "neural":
        return ClosedLoopPlanner(_load_model(config, weights),
                                 config.scheduler, prediction_type)
    raise ConfigError(f"unknown planner {kind!r}")


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    config = load_run_config(args.config)
    out_dir = args.output_dir or config.output_dir
    _write_snapshot(config, out_dir, {"command": "train"})
    store = ParamStore(seed=config.train_seed)
    scenarios = scenario_stream(config.templates, config.seeds)
    report = train(scenarios, store,
                   config.backbone, config.decoder, config.loss,
                   epochs=config.epochs, lr=config.lr,
                   momentum=config.momentum, clip_norm=config.clip_norm,
                   horizon=config.train_horizon,
                   checkpoint_dir=out_dir, log_every=args.log_every)
    losses = report.losses
    summary = {
        "steps": report.steps,
        "first_loss": losses[0],
        "last_loss": losses[-1],
        "min_loss": min(losses),
        "wall_time_s": report.wall_time,
        "checkpoint": os.path.join(out_dir, f"epoch_{config.epochs - 1:03d}.weights"),
    }
    with open(os.path.join(out_dir, "train_report.json"), "w") as f:
        json.dump({**summary, "losses": losses}, f, indent=2)
        f.write("\n")
    print(f"trained {report.steps} steps in {report.wall_time:.1f}s")
    print(f"loss first {losses[0]:.4f} -> last {losses[-1]:.4f} "
          f"(min {min(losses):.4f})")
    print(f"checkpoint {summary['checkpoint']}")
    return 0


# ---------------------------------------------------------------------------
# simulate

_SIM_MODE = {"nr": "nonreactive", "r": "reactive"}


def _run_one(config: RunConfig, scenario: Scenario, planner_kind: str,
             mode: str, prediction_type: str,
             weights: str | None = None) -> tuple:
    planner = build_planner(planner_kind, config, scenario,
                            prediction_type, weights)
    log = run_closed_loop(scenario, planner, mode,
                          duration=config.duration, dt=config.sim_step,
                          idm=config.idm)
    report = evaluate_log(log, scenario)
    return log, report


def cmd_simulate(args) -> int:
    config = load_run_config(args.config)
    if args.scenario:
        scenario = load_scenario(args.scenario)
        label = os.path.basename(args.scenario)
    else:
        scenario = generate_scenario(args.template, args.seed)
        label = f"{args.template}_{args.seed}"
    mode = _SIM_MODE[args.mode]
    log, report = _run_one(config, scenario, args.planner, mode,
                           args.prediction_type, args.weights)
    out_dir = args.output_dir or config.output_dir
    _write_snapshot(config, out_dir, {
        "command": "simulate", "scenario": label, "mode": mode,
        "planner": args.planner, "prediction_type": args.prediction_type,
    })
    write_simlog(log, os.path.join(out_dir, "simlog.jsonl"))
    write_event_log(log.events, os.path.join(out_dir, "events.jsonl"))
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report.as_row(), f, indent=2, sort_keys=True)
        f.write("\n")
    for k, v in report.as_row().items():
        print(f"{k}: {v}")
    return 0


# ---------------------------------------------------------------------------
# sweep

_SWEEP_CELL_FIELDS = ("grid_index", "t_plan", "alpha", "prediction_type",
                      "adaptive", "template", "seed")


def _sweep_cell(payload: dict) -> dict:
    """One rollout of the sweep grid; never raises, failures go in the row."""
    row = {k: payload[k] for k in _SWEEP_CELL_FIELDS}
    row["mode"] = payload["mode"]
    blank = MetricReport(False, None, None, False, None,
                         math.nan, 0, math.nan, math.nan, math.nan).as_row()
    try:
        config = config_from_dict(payload["config"])
        scheduler = dataclasses.replace(
            config.scheduler,
            plan_period=payload["t_plan"],
            ttc_penalty=payload["alpha"],
            enable_ttc_trigger=payload["adaptive"],
            enable_deviation_trigger=payload["adaptive"],
        )
        config = dataclasses.replace(config, scheduler=scheduler,
                                     sim_step=scheduler.monitor_period)
        scenario = generate_scenario(payload["template"], payload["seed"])
        _, report = _run_one(config, scenario, payload["planner"],
                             payload["mode"], payload["prediction_type"],
                             payload.get("weights"))
        row.update(report.as_row())
        row["error"] = ""
    except Exception as e:  # noqa: BLE001 - recorded per row, sweep continues
        row.update(blank)
        row["error"] = f"{type(e).__name__}: {e}"
    return row


def _parse_list(raw: str, cast) -> list:
    try:
        return [cast(part) for part in raw.split(",") if part != ""]
    except ValueError as e:
        raise ConfigError(f"bad list value {raw!r}: {e}")


def _parse_adaptive(raw: str) -> list:
    out = []
    for part in raw.split(","):
        if part not in ("on", "off"):
            raise ConfigError(f"adaptive values must be on|off, got {part!r}")
        out.append(part == "on")
    return out


def sweep_grid(config: RunConfig, tplans, alphas, pre_types, adaptives,
               planner: str, mode: str, weights: str | None = None) -> list:
    cells = []
    combos = itertools.product(tplans, alphas, pre_types, adaptives,
                               config.templates, config.seeds)
    for idx, (tp, al, pre, ad, template, seed) in enumerate(combos):
        cells.append({
            "grid_index": idx, "t_plan": tp, "alpha": al,
            "prediction_type": pre, "adaptive": ad,
            "template": template, "seed": seed,
            "mode": mode, "planner": planner, "weights": weights,
            "config": config.as_dict(),
        })
    return cells


def run_sweep(cells: list, workers: int = 1) -> list:
    """Rows come back ordered by grid index whatever the completion order."""
    if workers <= 1:
        return [_sweep_cell(c) for c in cells]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_cell, cells, chunksize=8))


def summarize_sweep(rows: list) -> list:
    groups: dict = {}
    for r in rows:
        key = (r["t_plan"], r["alpha"], r["prediction_type"], r["adaptive"])
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups):
        rs = groups[key]
        ok = [r for r in rs if not r["error"]]
        summary = {
            "t_plan": key[0], "alpha": key[1], "prediction_type": key[2],
            "adaptive": key[3], "count": len(rs), "failed": len(rs) - len(ok),
        }
        if ok:
            summary["mean_composite"] = float(np.mean([r["composite"] for r in ok]))
            summary["collision_rate"] = float(np.mean([r["collided"] for r in ok]))
            summary["offroad_rate"] = float(np.mean([r["off_road"] for r in ok]))
        else:
            summary["mean_composite"] = math.nan
            summary["collision_rate"] = math.nan
            summary["offroad_rate"] = math.nan
        out.append(summary)
    return out


def cmd_sweep(args) -> int:
    config = load_run_config(args.config)
    tplans = _parse_list(args.tplan, float)
    alphas = _parse_list(args.alpha, float)
    pre_types = [p for p in args.prediction_type.split(",") if p]
    for p in pre_types:
        if p not in ("cmp", "mpp"):
            raise ConfigError(f"prediction types must be cmp|mpp, got {p!r}")
    adaptives = _parse_adaptive(args.adaptive)
    mode = _SIM_MODE[args.mode]
    cells = sweep_grid(config, tplans, alphas, pre_types, adaptives,
                       args.planner, mode, args.weights)
    rows = run_sweep(cells, workers=args.workers)
    out_dir = args.output_dir or config.output_dir
    _write_snapshot(config, out_dir, {
        "command": "sweep", "tplan": tplans, "alpha": alphas,
        "prediction_type": pre_types,
        "adaptive": [("on" if a else "off") for a in adaptives],
        "planner": args.planner, "mode": mode, "workers": args.workers,
        "cells": len(cells),
    })
    rows_path = os.path.join(out_dir, "sweep_rows.csv")
    write_reports_csv(rows, rows_path)
    summary_path = os.path.join(out_dir, "sweep_summary.csv")
    write_reports_csv(summarize_sweep(rows), summary_path)
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} rollouts ({failed} failed) -> {rows_path}")
    print(f"summary -> {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# eval

def evaluate_dataset(model, scenarios: list) -> list:
    """Open-loop displacement error under both prediction types.

    The conditioned pass fixes the recorded ego future as the plan, so the
    two rows differ only in whether predictions saw it.
    """
    if not scenarios:
        raise ConfigError("dataset is empty")
    ades = {"mpp": [], "cmp": []}
    for sc in scenarios:
        _, svs = split_ev_modes(model.plan_modes(sc), sc.ev.id)
        a = conditional_ade(svs, sc)
        if not math.isnan(a):
            ades["mpp"].append(a)
        plan = reference_from_scenario(sc)
        cond = model.predict_conditioned(sc, plan)
        a = conditional_ade(cond, sc)
        if not math.isnan(a):
            ades["cmp"].append(a)
    return [{"pre_type": pre,
             "ade": float(np.mean(vals)) if vals else math.nan,
             "n_scenarios": len(vals)}
            for pre, vals in (("mpp", ades["mpp"]), ("cmp", ades["cmp"]))]


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    # every command drops a config.json snapshot; it is not a scenario
    paths = sorted(p for p in glob.glob(os.path.join(args.dataset, "*.json"))
                   if os.path.basename(p) != "config.json")
    if not paths:
        raise ConfigError(f"no scenario files in {args.dataset}")
    scenarios = [load_scenario(p) for p in paths]
    model = _load_model(config, args.weights)
    rows = evaluate_dataset(model, scenarios)
    out_dir = args.output_dir or config.output_dir
    _write_snapshot(config, out_dir, {"command": "eval", "dataset": args.dataset,
                                      "n_files": len(paths)})
    report_path = os.path.join(out_dir, "eval_report.csv")
    write_reports_csv(rows, report_path)
    print(f"{'pre_type':>8} {'ade':>10} {'n_scenarios':>12}")
    for r in rows:
        print(f"{r['pre_type']:>8} {r['ade']:>10.4f} {r['n_scenarios']:>12}")
    print(f"report -> {report_path}")
    return 0


# ---------------------------------------------------------------------------
# gen-scenarios

def cmd_gen_scenarios(args) -> int:
    config = load_run_config(args.config)
    out_dir = args.output_dir or config.output_dir
    _write_snapshot(config, out_dir, {"command": "gen-scenarios"})
    count = 0
    for template in config.templates:
        for seed in config.seeds:
            sc = generate_scenario(template, seed)
            save_scenario(sc, os.path.join(out_dir, f"{template}_{seed:04d}.json"))
            count += 1
    print(f"wrote {count} scenarios to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloop",
        description="closed-loop planning: train, simulate, sweep, eval")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None,
                       help="JSON config file (defaults apply if omitted)")
        p.add_argument("--output-dir", default=None,
                       help="override the config's output_dir")

    p = sub.add_parser("train", help="train a model on template scenarios")
    add_common(p)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="one closed-loop rollout plus metrics")
    add_common(p)
    p.add_argument("--scenario", default=None, help="scenario JSON file")
    p.add_argument("--template", default="lane_follow", choices=TEMPLATES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("nr", "r"), default="nr")
    p.add_argument("--prediction-type", choices=("cmp", "mpp"), default="cmp")
    p.add_argument("--planner", choices=("oracle", "heuristic", "neural"),
                   default="heuristic")
    p.add_argument("--weights", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="grid of rollouts over scheduler settings")
    add_common(p)
    p.add_argument("--tplan", default="2.0", help="comma list of plan periods")
    p.add_argument("--alpha", default="10.0", help="comma list of ttc penalties")
    p.add_argument("--prediction-type", default="cmp", help="comma list of cmp|mpp")
    p.add_argument("--adaptive", default="on", help="comma list of on|off")
    p.add_argument("--mode", choices=("nr", "r"), default="nr")
    p.add_argument("--planner", choices=("oracle", "heuristic", "neural"),
                   default="heuristic")
    p.add_argument("--weights", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="open-loop prediction error on a dataset")
    add_common(p)
    p.add_argument("--dataset", required=True, help="directory of scenario JSON")
    p.add_argument("--weights", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-scenarios", help="write template scenarios as JSON")
    add_common(p)
    p.set_defaults(func=cmd_gen_scenarios)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - runtime failure contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

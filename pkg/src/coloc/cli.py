"""Command line driver: scenario generation, training, runs, and sweeps.

Exit codes: 0 success, 1 usage, 2 bad config, 3 runtime failure. All file
outputs are written atomically and depend only on the config and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np
import yaml

from .evaluate import SWEEP_VARIABLES, compute_metrics, run_baseline, sweep, sweep_to_csv
from .nn.checkpoint import atomic_write_text
from .sim import (
    MODES,
    ObjectSpec,
    RobotSpec,
    ScenarioConfig,
    generate_scenario,
    run_scenario,
)
from .stgl import (
    SpatioTemporalGraph,
    TrainConfig,
    fully_connected_graph,
    load_bundle,
    save_bundle,
    train_ensemble,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

# windows rebuilt from logged rows carry a nominal covariance; the learner
# reads positions and adjacency only
_DATA_R = 0.01 * np.eye(3)


class ConfigError(Exception):
    """Config file problems, all collected into one message."""


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# config parsing


_TOP_KEYS = {"dt", "ticks", "seed", "active_robots", "history_length",
             "warmup_ticks", "objects", "robots", "train", "sweeps"}
_OBJECT_KEYS = {"id", "kind", "start", "velocity", "speed", "turn_rate_deg_s",
                "turn_start_s", "turn_duration_s", "waypoints"}
_ROBOT_KEYS = {"id", "position", "yaw_deg", "max_range", "noise_a", "noise_b",
               "latency", "occlusions"}
_TRAIN_KEYS = {"ensemble_size", "epochs", "learning_rate", "seed"}
_SWEEP_KEYS = {"latency", "robots", "noise", "seeds"}


def _as_vec(value, what, errors):
    try:
        vec = tuple(float(v) for v in value)
        if len(vec) != 3:
            raise ValueError
        return vec
    except (TypeError, ValueError):
        errors.append(f"{what} must be a list of three numbers, got {value!r}")
        return (0.0, 0.0, 0.0)


def _parse_objects(entries, errors):
    objects = []
    if not isinstance(entries, list):
        errors.append("objects must be a list")
        return objects
    for n, entry in enumerate(entries):
        where = f"objects[{n}]"
        if not isinstance(entry, dict):
            errors.append(f"{where} must be a mapping")
            continue
        unknown = sorted(set(entry) - _OBJECT_KEYS)
        if unknown:
            errors.append(f"{where} has unknown keys: {', '.join(unknown)}")
        if "id" not in entry:
            errors.append(f"{where} is missing an id")
            continue
        kw = {"object_id": str(entry["id"])}
        if "kind" in entry:
            kw["kind"] = str(entry["kind"])
        for key in ("start", "velocity"):
            if key in entry:
                kw[key] = _as_vec(entry[key], f"{where}.{key}", errors)
        for key in ("speed", "turn_rate_deg_s", "turn_start_s", "turn_duration_s"):
            if key in entry:
                kw[key] = float(entry[key])
        if "waypoints" in entry:
            kw["waypoints"] = tuple(
                _as_vec(w, f"{where}.waypoints[{i}]", errors)
                for i, w in enumerate(entry["waypoints"])
            )
        try:
            objects.append(ObjectSpec(**kw))
        except (ValueError, TypeError) as exc:
            errors.append(f"{where}: {exc}")
    return objects


def _parse_robots(entries, errors):
    robots = []
    if not isinstance(entries, list):
        errors.append("robots must be a list")
        return robots
    for n, entry in enumerate(entries):
        where = f"robots[{n}]"
        if not isinstance(entry, dict):
            errors.append(f"{where} must be a mapping")
            continue
        unknown = sorted(set(entry) - _ROBOT_KEYS)
        if unknown:
            errors.append(f"{where} has unknown keys: {', '.join(unknown)}")
        if "id" not in entry:
            errors.append(f"{where} is missing an id")
            continue
        kw = {"robot_id": str(entry["id"])}
        if "position" in entry:
            kw["position"] = _as_vec(entry["position"], f"{where}.position", errors)
        for key in ("yaw_deg", "max_range", "noise_a", "noise_b"):
            if key in entry:
                kw[key] = float(entry[key])
        if "latency" in entry:
            lat = entry["latency"]
            kw["latency"] = tuple(float(v) for v in lat) if isinstance(lat, list) else float(lat)
        if "occlusions" in entry:
            try:
                kw["occlusions"] = tuple(
                    (str(o), int(t0), int(t1)) for o, t0, t1 in entry["occlusions"]
                )
            except (TypeError, ValueError):
                errors.append(f"{where}.occlusions must be [object_id, start, end] triples")
        try:
            robots.append(RobotSpec(**kw))
        except (ValueError, TypeError) as exc:
            errors.append(f"{where}: {exc}")
    return robots


def validate_config(path):
    """Parse and validate a scenario config, reporting every problem at once.

    Returns {"scenario": ScenarioConfig, "train": TrainConfig, "sweeps": dict}.
    """
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid yaml: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")

    errors = []
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        errors.append(f"unknown top-level keys: {', '.join(unknown)}")

    objects = _parse_objects(data.get("objects", []), errors)
    robots = _parse_robots(data.get("robots", []), errors)
    if not objects:
        errors.append("at least one object is required")
    if not robots:
        errors.append("at least one robot is required")

    scenario = None
    if objects and robots:
        kw = {"objects": objects, "robots": robots}
        for key in ("dt", "seed", "ticks", "active_robots", "history_length", "warmup_ticks"):
            if key in data and data[key] is not None:
                kw[key] = float(data[key]) if key == "dt" else int(data[key])
        try:
            scenario = ScenarioConfig(**kw)
        except (ValueError, TypeError) as exc:
            errors.append(str(exc))

    train_section = data.get("train", {}) or {}
    train = None
    if not isinstance(train_section, dict):
        errors.append("train must be a mapping")
    else:
        unknown = sorted(set(train_section) - _TRAIN_KEYS)
        if unknown:
            errors.append(f"train has unknown keys: {', '.join(unknown)}")
        kw = {}
        for key in ("ensemble_size", "epochs", "seed"):
            if key in train_section:
                kw[key] = int(train_section[key])
        if "learning_rate" in train_section:
            kw["learning_rate"] = float(train_section["learning_rate"])
        if scenario is not None:
            kw["history_length"] = scenario.history_length
        try:
            train = TrainConfig(**kw)
        except (ValueError, TypeError) as exc:
            errors.append(f"train: {exc}")

    sweeps_section = data.get("sweeps", {}) or {}
    sweeps = {}
    if not isinstance(sweeps_section, dict):
        errors.append("sweeps must be a mapping")
    else:
        unknown = sorted(set(sweeps_section) - _SWEEP_KEYS)
        if unknown:
            errors.append(f"sweeps has unknown keys: {', '.join(unknown)}")
        for key in SWEEP_VARIABLES:
            if key in sweeps_section:
                try:
                    sweeps[key] = tuple(float(v) for v in sweeps_section[key])
                except (TypeError, ValueError):
                    errors.append(f"sweeps.{key} must be a list of numbers")
        seeds = sweeps_section.get("seeds", 1)
        try:
            sweeps["seeds"] = int(seeds)
            if sweeps["seeds"] < 1:
                raise ValueError
        except (TypeError, ValueError):
            errors.append("sweeps.seeds must be a positive integer")

    if errors:
        raise ConfigError("invalid config:\n" + "\n".join(f"- {e}" for e in errors))
    return {"scenario": scenario, "train": train, "sweeps": sweeps}


# ---------------------------------------------------------------------------
# training data from logged runs


def _windows_from_log(log, config: ScenarioConfig, source: str, horizons=None):
    """(window, targets) samples from a run's rows, one per robot and tick.

    source selects which logged positions form the window: "meas" for raw
    observations, "fused" for the filter's means. The target is the true
    position past the window, in the same robot's frame. By default the
    window ends one tick before the target; with horizons, each target tick
    cycles through the given gaps and the sample carries that rollout
    horizon, producing the delayed-history pairs compensation is trained on.
    """
    length = config.history_length
    samples = []
    for rid in sorted(log.rows):
        by_tick = {}
        for row in log.rows[rid]:
            pos = row.meas if source == "meas" else row.fused
            if np.isfinite(pos).all():
                by_tick.setdefault(row.tick, {})[str(row.object_id)] = (
                    np.asarray(pos, dtype=np.float64),
                    np.asarray(row.truth, dtype=np.float64),
                )
        for target_tick in sorted(by_tick):
            gap = 1 if horizons is None else horizons[target_tick % len(horizons)]
            ticks = range(target_tick - gap - length + 1, target_tick - gap + 1)
            if ticks[0] < 0 or any(t not in by_tick for t in ticks):
                continue
            ids = set(by_tick[target_tick])
            for t in ticks:
                ids &= set(by_tick[t])
            ids = sorted(ids)
            if not ids:
                continue
            graphs = [
                fully_connected_graph(
                    t * config.dt,
                    ids,
                    np.stack([by_tick[t][i][0] for i in ids]),
                    np.stack([_DATA_R] * len(ids)),
                )
                for t in ticks
            ]
            targets = {i: by_tick[target_tick][i][1] for i in ids}
            window = SpatioTemporalGraph(graphs, config.dt)
            samples.append((window, targets) if horizons is None
                           else (window, targets, gap))
    return samples


# delayed-history training pairs span the latency band, one gap per tick;
# long gaps appear more often because calibrating the accumulated
# uncertainty at long delays is what keeps stale estimates downweighted
_COMP_HORIZONS = (7, 3, 6, 2, 5, 7, 4, 6, 1, 7)


def build_prediction_set(config: ScenarioConfig):
    """One-step-ahead samples from raw observation windows."""
    log = run_scenario(config, mode="measurement-only")
    return _windows_from_log(log, config, "meas")


def build_compensation_set(config: ScenarioConfig, predictor):
    """Delayed-history samples from the belief windows a robot broadcasts.

    Runs the filter single-robot (fusion never feeds back into a robot's
    own recursion, so its solo belief sequence is exactly what it would
    send to peers) and pairs each belief window with the true position one
    to seven ticks later, so rolled-forward estimates stay on track over
    realistic delays."""
    solo = dataclasses.replace(config, active_robots=1)
    log = run_scenario(solo, predictor, mode="full")
    return _windows_from_log(log, solo, "fused", horizons=_COMP_HORIZONS)


# ---------------------------------------------------------------------------
# commands


def _write(path, text):
    atomic_write_text(str(path), text)


def _cmd_gen(args):
    cfg = validate_config(args.config)["scenario"]
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    trajectories, sensors, _, _ = generate_scenario(cfg)
    os.makedirs(args.out, exist_ok=True)
    files = []
    for traj in trajectories:
        lines = ["tick,x,y,z"]
        for t, p in enumerate(traj.positions):
            lines.append(f"{t},{p[0].item()!r},{p[1].item()!r},{p[2].item()!r}")
        name = f"truth_{traj.object_id}.csv"
        _write(os.path.join(args.out, name), "\n".join(lines) + "\n")
        files.append(name)
    robot_lines = ["id,x,y,z,yaw_deg,max_range,noise_a,noise_b"]
    for spec in cfg.robots:
        p = spec.position
        robot_lines.append(
            f"{spec.robot_id},{p[0]!r},{p[1]!r},{p[2]!r},{spec.yaw_deg!r},"
            f"{spec.max_range!r},{spec.noise_a!r},{spec.noise_b!r}"
        )
    _write(os.path.join(args.out, "robots.csv"), "\n".join(robot_lines) + "\n")
    manifest = {
        "seed": cfg.seed,
        "dt": cfg.dt,
        "ticks": cfg.ticks,
        "objects": [t.object_id for t in trajectories],
        "robots": [s.robot_id for s in sensors],
        "files": files + ["robots.csv"],
    }
    _write(os.path.join(args.out, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(files) + 2} files to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    parsed = validate_config(args.config)
    cfg, train_cfg = parsed["scenario"], parsed["train"]
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    predictor_set = build_prediction_set(cfg)
    if not predictor_set:
        raise RuntimeError("scenario produced no usable training windows")
    predictor = train_ensemble(predictor_set, train_cfg)
    compensator_set = build_compensation_set(cfg, predictor)
    if not compensator_set:
        raise RuntimeError("scenario produced no usable training windows")
    comp_cfg = dataclasses.replace(train_cfg, seed=train_cfg.seed + 1)
    compensator = train_ensemble(compensator_set, comp_cfg)
    save_bundle(args.out, predictor, compensator)

    loss_lines = ["ensemble,member,epoch,loss"]
    for name, models in (("predictor", predictor), ("compensator", compensator)):
        for k, model in enumerate(models):
            for epoch, value in enumerate(model.loss_history):
                loss_lines.append(f"{name},{k},{epoch},{value!r}")
    loss_path = os.path.splitext(args.out)[0] + "_loss.csv"
    _write(loss_path, "\n".join(loss_lines) + "\n")
    print(
        f"trained {len(predictor)}+{len(compensator)} members on "
        f"{len(predictor_set)}/{len(compensator_set)} windows; "
        f"final losses {predictor[-1].final_train_loss:.4f}/"
        f"{compensator[-1].final_train_loss:.4f}"
    )
    print(f"bundle: {args.out}")
    print(f"losses: {loss_path}")
    return EXIT_OK


def _load_models(args):
    if getattr(args, "bundle", None):
        return load_bundle(args.bundle)
    return None, None


def _cmd_run(args):
    cfg = validate_config(args.config)["scenario"]
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    predictor, compensator = _load_models(args)
    mode = args.baseline or "full"
    log = run_scenario(cfg, predictor, compensator, mode=mode,
                       compensation=not args.no_compensation)
    os.makedirs(args.out, exist_ok=True)
    for rid in log.robot_ids:
        _write(os.path.join(args.out, f"robot_{rid}.csv"), log.robot_csv(rid))
    _write(os.path.join(args.out, "channels.log"), log.channel_log_text())
    report = compute_metrics(log)
    metrics = {
        "mode": mode,
        "seed": cfg.seed,
        "de": report.de,
        "rel_de": report.rel_de,
        "rows": report.rows,
        "messages_sent": log.messages_sent,
        "messages_delivered": log.messages_delivered,
    }
    _write(os.path.join(args.out, "metrics.json"), json.dumps(metrics, indent=2) + "\n")
    if args.json:
        print(json.dumps(metrics))
    else:
        print(f"mode={mode} seed={cfg.seed} de={report.de:.4f} rel_de={report.rel_de:.4f} "
              f"rows={report.rows}")
    return EXIT_OK


def _cmd_eval(args):
    cfg = validate_config(args.config)["scenario"]
    predictor, compensator = _load_models(args)
    kinds = [args.baseline] if args.baseline else list(MODES)
    seeds = tuple(cfg.seed + i for i in range(args.seeds))
    results = {}
    for kind in kinds:
        if kind in ("learning-only", "full") and not predictor:
            raise RuntimeError(f"baseline {kind!r} needs --bundle")
        report = run_baseline(kind, cfg, predictor, compensator, seeds=seeds)
        results[kind] = {"de": report.de, "de_std": report.de_std,
                         "rel_de": report.rel_de, "rows": report.rows}
    if args.json:
        print(json.dumps({"seeds": list(seeds), "baselines": results}))
    else:
        for kind in kinds:
            r = results[kind]
            print(f"{kind:>17}: de={r['de']:.4f} ± {r['de_std']:.4f}  "
                  f"rel_de={r['rel_de']:.4f}  rows={r['rows']}")
    return EXIT_OK


def _cmd_sweep(args):
    parsed = validate_config(args.config)
    cfg, sweeps = parsed["scenario"], parsed["sweeps"]
    predictor, compensator = _load_models(args)
    if args.grid:
        try:
            grid = tuple(float(v) for v in args.grid.split(","))
        except ValueError:
            raise _UsageError(f"--grid must be comma-separated numbers, got {args.grid!r}")
    elif args.var in sweeps:
        grid = sweeps[args.var]
    else:
        raise ConfigError(f"config has no sweeps.{args.var} grid and no --grid was given")
    seeds = tuple(cfg.seed + i for i in range(args.seeds or sweeps.get("seeds", 1)))
    kind = args.baseline or "full"
    result = sweep(args.var, grid, cfg, predictor, compensator, seeds=seeds,
                   kind=kind, threads=args.threads)
    _write(args.out, sweep_to_csv(result))
    print(f"{args.var} sweep ({kind}, {len(seeds)} seeds): auc={result.auc:.4f} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> _Parser:
    parser = _Parser(prog="coloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, bundle=False, seed=True):
        p.add_argument("--config", required=True, help="scenario yaml")
        if bundle:
            p.add_argument("--bundle", help="trained model bundle (json)")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override scenario seed")

    p = sub.add_parser("gen", help="write ground-truth trajectories and robot poses")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train predictor and compensator ensembles")
    common(p)
    p.add_argument("--out", required=True, help="bundle path to write")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("run", help="run the pipeline and write per-robot logs")
    common(p, bundle=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--baseline", choices=MODES, default=None,
                   help="pipeline variant (default: full)")
    p.add_argument("--no-compensation", action="store_true",
                   help="fuse delayed estimates without rolling them forward")
    p.add_argument("--json", action="store_true", help="print metrics as json")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="score baselines over several seeds")
    common(p, bundle=True, seed=False)
    p.add_argument("--baseline", choices=MODES, default=None,
                   help="single variant (default: all four)")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p.add_argument("--json", action="store_true", help="print metrics as json")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="mean error along one scenario axis")
    common(p, bundle=True, seed=False)
    p.add_argument("--var", required=True, choices=SWEEP_VARIABLES)
    p.add_argument("--grid", default=None, help="comma-separated values")
    p.add_argument("--out", required=True, help="csv path to write")
    p.add_argument("--seeds", type=int, default=None,
                   help="number of seeds (default: sweeps.seeds from config)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--baseline", choices=MODES, default=None,
                   help="pipeline variant (default: full)")
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: record -> fit-surrogate -> tune -> train-controller
-> simulate -> compare.

Every command reads one JSON experiment config, writes its outputs plus a
fully-resolved config echo into --out, and is deterministic given the config
bytes and seed. Exit codes: 0 success, 2 config/validation error,
3 numerical failure, 4 I/O or data-file error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .dataio import from_trajectory, generate_excitation, read_timeseries, resample_uniform, \
    write_timeseries
from .errors import (
    ConfigError, ControllerFault, IdentificationError, InvalidSpec, LoopbenchError,
    MustResample, NoLimitCycle, ParseError, RolloutDiverged, SimulationDiverged, TooShort,
    TrainingDiverged, TrainingUnstable, TuningFailed, UnrecoverableFault,
)
from .metrics import ComparisonTable, compare, compute_step_metrics
from .neuro import (
    DualDatasetMix, GainScheduler, NeuralControlLoop, NeuralController,
    imitation_data_from_run, save_controller, save_scheduler, train_bptt,
    train_imitation, train_imitation_multitask, tune_static_ai,
)
from .nnet import LinearHead, Mlp
from .pid import PidController
from .safety import BlendedController, BoundedBlender, SupervisedController, SwitchSupervisor, \
    write_transition_log
from .simcore import ConstantController, SignalController, simulate
from .surrogate import fit_surrogate, load_narx, save_narx
from .tuning import (
    FopdtModel, identify_fopdt_step, relay_experiment, run_step_test, tune_cohen_coon,
    tune_kappa_tau, tune_ziegler_nichols, ultimate_from_fopdt,
)

_NUMERICAL = (SimulationDiverged, TrainingDiverged, TrainingUnstable, TuningFailed,
              NoLimitCycle, IdentificationError, RolloutDiverged, ControllerFault,
              UnrecoverableFault)
_IO = (ParseError, MustResample, TooShort, OSError)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: dict, out: Path, command: str) -> None:
    cfgmod.dump_config(cfg, out / f"{command}_config.json")


def _write_kv_csv(path: Path, pairs) -> None:
    lines = ["key,value"] + [f"{k},{v!r}" if isinstance(v, str) else f"{k},{repr(v)}"
                             for k, v in pairs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# record
# ---------------------------------------------------------------------------

def cmd_record(args) -> int:
    cfg = cfgmod.load_config(args.config, required=("sim", "plant", "excitation"))
    sim = cfgmod.sim_from(cfg, args.seed)
    plant = cfgmod.plant_from(cfg)
    exc = cfgmod.excitation_from(cfg)
    u = generate_excitation(exc, sim, limits=(plant.u_min, plant.u_max))
    traj = simulate(plant, SignalController(u), 0.0,
                    disturbance=cfgmod.disturbance_from(cfg),
                    sensor=cfgmod.sensor_from(cfg), cfg=sim)
    out = _out_dir(args)
    write_timeseries(from_trajectory(traj), out / "record.csv")
    _echo(cfg, out, "record")
    print(f"recorded {len(traj)} samples -> {out / 'record.csv'}")
    return 0


# ---------------------------------------------------------------------------
# fit-surrogate
# ---------------------------------------------------------------------------

def cmd_fit_surrogate(args) -> int:
    cfg = cfgmod.load_config(args.config, required=("sim",))
    sur = cfg["surrogate"]
    series = read_timeseries(args.data)
    resampled = False
    if not series.is_uniform():
        series = resample_uniform(series, float(cfg["sim"]["dt"]))
        resampled = True
    model, report = fit_surrogate(
        series, int(sur["p"]), int(sur["q"]),
        cfgmod.train_config_from(sur),
        hidden=tuple(int(h) for h in sur["hidden"]),
        val_fraction=float(sur["val_fraction"]),
        resampled=resampled,
    )
    out = _out_dir(args)
    save_narx(model, out / "surrogate.weights")
    _write_kv_csv(out / "surrogate_report.csv", sorted(report.as_dict().items()))
    _echo(cfg, out, "fit-surrogate")
    for key, value in sorted(report.as_dict().items()):
        print(f"{key}: {value}")
    return 0


# ---------------------------------------------------------------------------
# tune
# ---------------------------------------------------------------------------

def _identified_model(cfg, sim) -> FopdtModel:
    t = cfg["tuning"]
    if t["fopdt"] is not None:
        f = t["fopdt"]
        return FopdtModel(gain=float(f["gain"]), tau=float(f["tau"]),
                          dead_time=float(f["dead_time"]))
    plant = cfgmod.plant_from(cfg)
    traj = run_step_test(plant, sim, u1=float(t["step_level"]))
    return identify_fopdt_step(traj)


def cmd_tune(args) -> int:
    cfg = cfgmod.load_config(args.config, required=("tuning",))
    sim = cfgmod.sim_from(cfg, args.seed)
    t = cfg["tuning"]
    out = _out_dir(args)
    limits = tuple(float(v) for v in cfg["plant"]["limits"])

    if t["mode"] == "rule":
        gain_kw = {"u_min": limits[0], "u_max": limits[1]}
        if t["rule"] == "ziegler-nichols":
            if t["fopdt"] is not None:
                f = t["fopdt"]
                up = ultimate_from_fopdt(FopdtModel(float(f["gain"]), float(f["tau"]),
                                                    float(f["dead_time"])))
            else:
                up = relay_experiment(cfgmod.plant_from(cfg), float(t["relay_amplitude"]), sim)
            gains = tune_ziegler_nichols(up, t["kind"], **gain_kw)
        else:
            model = _identified_model(cfg, sim)
            rule = tune_cohen_coon if t["rule"] == "cohen-coon" else tune_kappa_tau
            gains = rule(model, **gain_kw)
        trace = []
    else:
        if int(t["budget"]) < 1:
            raise ConfigError("AI tuning needs a positive evaluation budget", "tuning.budget")
        if not args.surrogate:
            raise ConfigError("AI tuning needs --surrogate <model>", "tuning.mode")
        narx = load_narx(args.surrogate)
        count = int(t["episodes"]["count"])
        level = float(t["episodes"]["level"])
        n_steps = max(int(round(sim.horizon / narx.dt)), 2)
        episodes = [np.concatenate([np.zeros(2), np.full(n_steps, level * (i + 1) / count)])
                    for i in range(count)]
        result = tune_static_ai(
            narx, episodes,
            cfgmod.bounds_from(t["bounds"], "tuning.bounds"),
            budget=int(t["budget"]), rho=float(t["rho"]), seed=sim.seed,
            restarts=int(t["restarts"]),
            x0=None if t["x0"] is None else np.array(t["x0"], dtype=float),
            gain_kw={"u_min": limits[0], "u_max": limits[1]},
        )
        gains = result.gains
        trace = result.trace

    with open(out / "gains.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(cfgmod.gains_to_dict(gains), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if trace:
        lines = ["eval,cost"] + [f"{i},{repr(c)}" for i, c in trace]
        (out / "tune_trace.csv").write_text("\n".join(lines) + "\n", encoding="utf-8",
                                            newline="\n")
    _echo(cfg, out, "tune")
    print(f"kp={gains.kp!r} ki={gains.ki!r} kd={gains.kd!r} -> {out / 'gains.json'}")
    return 0


# ---------------------------------------------------------------------------
# train-controller
# ---------------------------------------------------------------------------

def _coverage_reference(sim, level: float, seed: int) -> np.ndarray:
    """Dataset-A style reference: piecewise-constant pseudo-random levels."""
    from .dataio import prbs_bits

    bits = prbs_bits(6, seed=seed)
    hold = max(int(round(sim.n_steps / len(bits))), 8)
    idx = (np.arange(sim.n_steps) // hold) % len(bits)
    return np.where(bits[idx] == 1, level, -level).astype(float)


def _teacher_runs(cfg, sim, limits):
    plant = cfgmod.plant_from(cfg)
    teacher_gains = cfgmod.resolve_gains(cfg["training"]["teacher"], limits, "training.teacher")
    dist = cfgmod.disturbance_from(cfg)
    sensor = cfgmod.sensor_from(cfg)
    count = int(cfg["training"]["episodes"]["count"])
    level = float(cfg["training"]["episodes"]["level"])
    runs_a, runs_b = [], []
    for i in range(count):
        cfg_i = type(sim)(dt=sim.dt, horizon=sim.horizon, seed=sim.seed + i)
        ref_a = _coverage_reference(cfg_i, level, seed=sim.seed + i + 1)
        runs_a.append(simulate(plant, PidController(teacher_gains), ref_a, dist, sensor, cfg_i))
        ref_b = level * (i + 1) / count
        runs_b.append(simulate(plant, PidController(teacher_gains), ref_b, dist, sensor, cfg_i))
    return runs_a, runs_b, teacher_gains


def _stack_datasets(runs, memory, with_d):
    from .nnet import SupervisedDataset

    parts = [imitation_data_from_run(r, memory, with_disturbance=with_d) for r in runs]
    x = np.vstack([p.x for p in parts])
    y = np.vstack([p.y for p in parts])
    return SupervisedDataset(x, y)


def cmd_train_controller(args) -> int:
    cfg = cfgmod.load_config(args.config, required=("sim", "training"))
    sim = cfgmod.sim_from(cfg, args.seed)
    tr = cfg["training"]
    out = _out_dir(args)
    limits = tuple(float(v) for v in cfg["plant"]["limits"])
    memory = int(tr["memory"])
    hidden = [int(h) for h in tr["hidden"]]
    tc = cfgmod.train_config_from(tr)

    if tr["mode"] == "imitation":
        runs_a, runs_b, _ = _teacher_runs(cfg, sim, limits)
        beta = float(tr["beta"])
        with_d = beta > 0.0
        mix = DualDatasetMix(_stack_datasets(runs_a, memory, with_d),
                             _stack_datasets(runs_b, memory, with_d),
                             lam=float(tr["lambda"]))
        aux = LinearHead(hidden[-1], 1, seed=tc.seed + 1000) if with_d else None
        nc = NeuralController(Mlp([1 + 2 * memory, *hidden, 1], seed=tc.seed),
                              u_min=limits[0], u_max=limits[1], memory=memory, aux=aux)
        result = (train_imitation_multitask(nc, mix, tc, aux_weight=beta) if with_d
                  else train_imitation(nc, mix, tc))
        save_controller(result.controller, out / "controller.weights",
                        extras={"mode": "imitation", "lambda": float(tr["lambda"]),
                                "beta": beta})
        lines = ["epoch,train_loss,val_rmse_a,val_rmse_b"]
        for i, (loss, va, vb) in enumerate(result.history):
            lines.append(f"{i},{repr(loss)},{repr(va)},{repr(vb)}")
        (out / "training_curve.csv").write_text("\n".join(lines) + "\n", encoding="utf-8",
                                                newline="\n")
        print(f"val rmse A={result.val_rmse_a!r} B={result.val_rmse_b!r} "
              f"-> {out / 'controller.weights'}")
    else:
        if not args.surrogate:
            raise ConfigError("bptt training needs --surrogate <model>", "training.mode")
        narx = load_narx(args.surrogate)
        horizon = int(tr["horizon"])
        count = int(tr["episodes"]["count"])
        level = float(tr["episodes"]["level"])
        refs = [np.full(horizon + 1, level * (i + 1) / count) for i in range(count)]
        if tr["target"] == "controller":
            target = NeuralController(Mlp([1 + 2 * memory, *hidden, 1], seed=tc.seed),
                                      u_min=limits[0], u_max=limits[1], memory=memory)
        else:
            bounds = cfgmod.bounds_from(tr["bounds"], "training.bounds")
            target = GainScheduler(Mlp([2 * memory, *hidden, 3], seed=tc.seed),
                                   bounds=bounds, memory=memory)
        result = train_bptt(target, narx, refs, horizon, tc, rho=float(tr["rho"]),
                            limits=limits)
        name = "controller.weights" if tr["target"] == "controller" else "scheduler.weights"
        extras = {"mode": "bptt", "horizon": horizon, "rho": float(tr["rho"])}
        if tr["target"] == "controller":
            save_controller(result.trained, out / name, extras=extras)
        else:
            save_scheduler(result.trained, out / name, extras=extras)
        lines = ["epoch,loss,skipped"]
        for i, (loss, sk) in enumerate(zip(result.history, result.skipped)):
            lines.append(f"{i},{repr(loss)},{sk}")
        (out / "training_curve.csv").write_text("\n".join(lines) + "\n", encoding="utf-8",
                                                newline="\n")
        print(f"final rollout loss {result.history[-1]!r} -> {out / name}")
    _echo(cfg, out, "train-controller")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _correction_source(block: dict, limits):
    if block["kind"] == "constant":
        return ConstantController(float(block["value"]))
    if block["kind"] == "neural":
        from .neuro import load_controller

        if not block["model_path"]:
            raise ConfigError("neural correction needs model_path", "safety.correction.model_path")
        return NeuralControlLoop(load_controller(block["model_path"]))
    raise ConfigError("correction kind must be constant or neural", "safety.correction.kind")


def cmd_simulate(args) -> int:
    cfg = cfgmod.load_config(args.config, required=("sim", "plant", "controller"))
    if args.model:
        cfg["controller"]["model_path"] = args.model
    sim = cfgmod.sim_from(cfg, args.seed)
    plant = cfgmod.plant_from(cfg)
    limits = (plant.u_min, plant.u_max)
    controller = cfgmod.controller_from(cfg, limits)

    safety = cfg["safety"]
    supervisor = None
    blender = None
    if safety["kind"] == "switch":
        fallback = PidController(cfgmod.resolve_gains(safety["fallback"], limits, "safety.fallback"))
        supervisor = SwitchSupervisor(theta_hi=float(safety["theta_hi"]),
                                      theta_lo=float(safety["theta_lo"]),
                                      dwell=int(safety["dwell"]),
                                      agree_tol=None if safety["agree_tol"] is None
                                      else float(safety["agree_tol"]))
        controller = SupervisedController(controller, fallback, supervisor, limits)
    elif safety["kind"] == "blend":
        blender = BoundedBlender(delta=float(safety["delta"]))
        controller = BlendedController(controller, _correction_source(safety["correction"], limits),
                                       blender, limits)

    traj = simulate(plant, controller, cfgmod.reference_from(cfg),
                    disturbance=cfgmod.disturbance_from(cfg),
                    sensor=cfgmod.sensor_from(cfg), cfg=sim)

    out = _out_dir(args)
    write_timeseries(from_trajectory(traj), out / "trajectory.csv")
    plot_lines = ["t,w,y,u"]
    for k in range(len(traj)):
        plot_lines.append(",".join(repr(float(v)) for v in
                                   (traj.t[k], traj.w[k], traj.y[k], traj.u[k])))
    (out / "plot.csv").write_text("\n".join(plot_lines) + "\n", encoding="utf-8", newline="\n")

    metrics = compute_step_metrics(traj, band=0.02)
    ComparisonTable([(cfg["controller"]["kind"], metrics)]).to_csv(out / "metrics.csv")

    if supervisor is not None:
        write_transition_log(supervisor.log, out / "transitions.csv", dt=sim.dt)
    if blender is not None:
        lines = ["step,time,u_conv,u"]
        for k, (uc, u) in enumerate(zip(controller.u_conv_trace, controller.u_trace)):
            lines.append(f"{k},{repr(k * sim.dt)},{repr(uc)},{repr(u)}")
        (out / "blend.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    _echo(cfg, out, "simulate")
    settle = repr(metrics.settling_time_s) if metrics.settled else "not-settled"
    print(f"IAE={metrics.iae!r} overshoot%={metrics.overshoot_pct!r} settling={settle}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def cmd_compare(args) -> int:
    paths = [Path(p) for p in args.trajectories]
    labels = [p.stem for p in paths]
    if len(set(labels)) != len(labels):
        labels = [str(p) for p in paths]
    series = [read_timeseries(p) for p in paths]

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            metrics = list(pool.map(lambda s: compute_step_metrics(s, band=args.band), series))
        for label, s in zip(labels[1:], series[1:]):
            if not (np.array_equal(series[0].w, s.w) and np.array_equal(series[0].d, s.d)):
                raise ConfigError(f"{label} has a different reference or disturbance", "compare")
        rows = sorted(zip(labels, metrics), key=lambda r: (r[1].iae, r[0]))
        table = ComparisonTable(rows)
    else:
        table = compare(list(zip(labels, series)), band=args.band)

    out = _out_dir(args)
    table.to_csv(out / "comparison.csv")
    print(table.format_text())
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loopbench",
        description="Closed-loop control workbench: record, model, tune, train, simulate, compare.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override sim.seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers where supported")

    p = sub.add_parser("record", help="open-loop excitation run, recorded to CSV")
    common(p)
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("fit-surrogate", help="train an empirical plant model from a recording")
    common(p)
    p.add_argument("--data", required=True, help="time-series CSV to fit")
    p.set_defaults(func=cmd_fit_surrogate)

    p = sub.add_parser("tune", help="classical rules or AI gain search")
    common(p)
    p.add_argument("--surrogate", default=None, help="surrogate model (ai mode)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("train-controller", help="imitation or closed-loop (bptt) training")
    common(p)
    p.add_argument("--surrogate", default=None, help="surrogate model (bptt mode)")
    p.set_defaults(func=cmd_train_controller)

    p = sub.add_parser("simulate", help="closed-loop run with the configured safety wrapper")
    common(p)
    p.add_argument("--model", default=None, help="override controller.model_path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="metrics table over recorded trajectories")
    p.add_argument("trajectories", nargs="+", help="trajectory CSV files")
    p.add_argument("--band", type=float, default=0.02, help="settling band fraction")
    common(p, config=False)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidSpec) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _NUMERICAL as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except _IO as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except LoopbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

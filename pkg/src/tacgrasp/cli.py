"""Command-line orchestration: dataset generation, training, the three
grasp-manipulation experiments, and the networked array service.

Exit codes: 0 verdict pass, 1 verdict fail, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen, learning, plots
from .array_service import (
    ArrayService,
    NetworkSensing,
    SensorHub,
    TelemetryServer,
    telemetry_snapshot,
)
from .control import CONTROL_DT, ControllerConfig, load_controller_config, velocity_command
from .datagen import CollectionConfig, POSE_FORCE_NAMES
from .experiments import (
    build_sensor_array,
    default_exp3_script,
    experiment_train_config,
    prepare_models,
    run_exp1,
    run_exp1_baseline,
    run_exp2,
    run_exp3,
    write_csv,
)
from .plant import Disturbance, Plant, PlantConfig, load_disturbance_script, pour_trajectory
from .tactile import Sensor, SensorVariation, default_geometry


def _parse_masses(text: str):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad mass list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tacgrasp",
        description="Shear-based grasp control testbed: data, models, and experiments.",
    )
    parser.add_argument("--config", help="controller config JSON (or TACGRASP_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect labeled datasets for the five sensors")
    p.add_argument("--out", default="data", help="output directory")
    p.add_argument("--samples", type=int, default=3000, help="train+val samples per sensor")
    p.add_argument("--test", type=int, default=600, help="test samples per sensor")
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train pose/force models with one strategy")
    p.add_argument("--data", default="data", help="directory from gen-data")
    p.add_argument("--out", default="models", help="output directory")
    p.add_argument(
        "--strategy", default="standard",
        choices=["individual", "aggregate", "progressive", "standard", "all"],
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--plots", action="store_true", help="render figures next to the CSVs")

    p = sub.add_parser("exp1", help="static grasp stabilization under added mass")
    p.add_argument("--mass", type=_parse_masses, default=[300.0],
                   help="grams, comma-separated for a sweep")
    p.add_argument("--input", default="step", choices=["step", "ramp"])
    p.add_argument("--runs", type=int, default=1, help="seeded runs per mass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", default="models")
    p.add_argument("--out", default="results")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--over-network", action="store_true")
    p.add_argument("--baseline", action="store_true",
                   help="run the constant-grasp empty-cup baseline instead")

    p = sub.add_parser("exp2", help="pouring task with the moving-grasp stabilizer")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mass", type=float, default=150.0, help="grams of rice")
    p.add_argument("--rate", type=float, default=10.0, help="pour rotation, deg/s")
    p.add_argument("--angle", type=float, default=120.0, help="pour angle, deg")
    p.add_argument("--fill-duration", type=float, default=8.0)
    p.add_argument("--models", default="models")
    p.add_argument("--out", default="results")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--over-network", action="store_true")

    p = sub.add_parser("exp3", help="leader-follower guidance from applied forces")
    p.add_argument("--scripted", help="JSON force script (default: axis pulses)")
    p.add_argument("--interactive", action="store_true",
                   help="consume APPLY_FORCE commands from the telemetry channel")
    p.add_argument("--duration", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--models", default="models")
    p.add_argument("--out", default="results")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--telemetry-port", type=int, default=8765)
    p.add_argument("--realtime", action="store_true",
                   help="pace simulated time to the wall clock")

    p = sub.add_parser("serve", help="run the sensor array and a live telemetry session")
    p.add_argument("--sensors", type=int, default=5)
    p.add_argument("--base-port", type=int, default=7400)
    p.add_argument("--telemetry-port", type=int, default=8765)
    p.add_argument("--models", default="models")
    p.add_argument("--sample-rate", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=0.0,
                   help="stop after this many seconds (0 = run until interrupted)")

    p = sub.add_parser("report", help="render figures from result CSVs")
    p.add_argument("csvs", nargs="+")

    return parser


def _load_models(models_dir, sensors, seed=0):
    return prepare_models(sensors, models_dir, seed=seed)


def _print_verdict(tag: str, verdict) -> bool:
    status = "PASS" if verdict.passed else "FAIL"
    print(f"[{tag}] {status}" + ("" if verdict.passed else f": {'; '.join(verdict.reasons)}"))
    for key, value in sorted(verdict.metrics.items()):
        if isinstance(value, float):
            print(f"    {key} = {value:.4g}")
    return verdict.passed


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    geom = default_geometry()
    for k in range(5):
        sensor = Sensor(geom, SensorVariation.sample(k), sensor_id=k)
        cfg = CollectionConfig(
            n_train_val=args.samples, split=args.split, n_test=args.test,
            seed=args.seed * 1000 + k,
        )
        train, val, test = datagen.collect(sensor, cfg)
        for name, ds in (("train", train), ("val", val), ("test", test)):
            datagen.save_dataset(ds, out / f"sensor{k}_{name}.csv")
        datagen.save_metadata(out / f"sensor{k}.meta.json", sensor, cfg)
        print(f"sensor {k}: {len(train)} train / {len(val)} val / {len(test)} test")
    return 0


STRATEGY_NAMES = {
    "individual": "individual",
    "aggregate": "aggregate",
    "progressive": "progressive_transfer",
    "standard": "standard_transfer",
}


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trains, vals, tests = [], [], []
    for k in range(5):
        for name, bucket in (("train", trains), ("val", vals), ("test", tests)):
            path = data_dir / f"sensor{k}_{name}.csv"
            if not path.exists():
                print(f"missing dataset: {path}", file=sys.stderr)
                return 2
            bucket.append(datagen.load_dataset(path))

    chosen = (
        list(STRATEGY_NAMES.values()) if args.strategy == "all"
        else [STRATEGY_NAMES[args.strategy]]
    )
    cfg = experiment_train_config(args.seed)
    cfg = learning.TrainConfig(
        layer_sizes=(trains[0].features.shape[1], args.hidden, args.hidden, 6),
        epochs=args.epochs, pretrain_epochs=args.epochs,
        finetune_epochs=max(5, args.epochs * 2 // 3), finetune_lr=cfg.finetune_lr,
        seed=args.seed,
    )
    report_rows = []
    for strategy in chosen:
        models = learning.run_strategy(strategy, trains, cfg, val_sets=vals)
        per_sensor = models if len(models) == 5 else [models[0]] * 5
        scatter_path = out / f"scatter_{strategy}.csv"
        with scatter_path.open("w", encoding="utf-8") as fh:
            fh.write("sensor_id,output,label,prediction\n")
            for k, (model, test) in enumerate(zip(per_sensor, tests)):
                result = learning.evaluate(model, test)
                for d, name in enumerate(POSE_FORCE_NAMES):
                    report_rows.append((strategy, k, name, result.mae[d]))
                    for lab, pred in zip(result.labels[:, d], result.predictions[:, d]):
                        fh.write(f"{k},{name},{lab:.10g},{pred:.10g}\n")
        for k, model in enumerate(models):
            suffix = f"_sensor{k}" if len(models) == 5 else ""
            learning.save_model(model, out / f"model_{strategy}{suffix}.json")
        print(f"{strategy}: {len(models)} model(s) trained")
        if args.plots:
            plots.render_scatter(scatter_path)

    report = out / "mae_report.csv"
    with report.open("w", encoding="utf-8") as fh:
        fh.write("strategy,sensor_id,output,mae\n")
        for strategy, k, name, mae in report_rows:
            fh.write(f"{strategy},{k},{name},{mae:.10g}\n")
    print(f"wrote {report}")
    if args.plots:
        plots.render_mae_report(report)
    return 0


def _network_context(sensors, models, seed):
    hub = SensorHub(len(sensors))
    service = ArrayService(sensors, models, hub=hub, mode="follow", seed=seed)
    service.start()
    sensing = NetworkSensing(hub, service.aggregator())
    return service, sensing


def cmd_exp1(args, controller_cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sensors = build_sensor_array()
    models, _ = _load_models(args.models, sensors, seed=args.seed)

    if args.baseline:
        steady = run_exp1(300.0, "step", seed=args.seed, sensors=sensors, models=models,
                          controller_cfg=controller_cfg)
        verdict = run_exp1_baseline(steady.verdict.metrics["steady_fz"], seed=args.seed,
                                    sensors=sensors)
        return 0 if _print_verdict("exp1-baseline", verdict) else 1

    all_pass = True
    steady_by_mass = {}
    for mass in args.mass:
        for run in range(args.runs):
            seed = args.seed + run
            service = sensing = None
            try:
                if args.over_network:
                    service, sensing = _network_context(sensors, models, seed)
                result = run_exp1(mass, args.input, seed=seed, sensors=sensors,
                                  models=models, controller_cfg=controller_cfg,
                                  sensing=sensing)
            finally:
                if sensing is not None:
                    sensing.close()
                if service is not None:
                    service.stop()
            tag = f"exp1-{args.input}-{int(mass)}g-seed{seed}"
            path = out / f"{tag}.csv"
            write_csv(result, path)
            if args.plots:
                plots.render_exp1(path)
            steady_by_mass.setdefault(mass, []).append(result.verdict.metrics["steady_fz"])
            all_pass &= _print_verdict(tag, result.verdict)
    if len(args.mass) > 1:
        means = [float(np.mean(steady_by_mass[m])) for m in sorted(args.mass)]
        ordered = all(a < b for a, b in zip(means, means[1:]))
        print(f"[exp1] steady grasp force by mass: {[round(v, 2) for v in means]} "
              f"({'ordered' if ordered else 'NOT ordered'})")
        all_pass &= ordered
    return 0 if all_pass else 1


def cmd_exp2(args, controller_cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sensors = build_sensor_array()
    models, _ = _load_models(args.models, sensors, seed=args.seed)
    all_pass = True
    for run in range(args.runs):
        seed = args.seed + run
        service = sensing = None
        try:
            if args.over_network:
                service, sensing = _network_context(sensors, models, seed)
            result = run_exp2(seed=seed, mass_g=args.mass, fill_duration=args.fill_duration,
                              pour_angle=args.angle, pour_rate=args.rate, sensors=sensors,
                              models=models, controller_cfg=controller_cfg, sensing=sensing)
        finally:
            if sensing is not None:
                sensing.close()
            if service is not None:
                service.stop()
        tag = f"exp2-seed{seed}"
        path = out / f"{tag}.csv"
        write_csv(result, path)
        if args.plots:
            plots.render_exp2(path)
        all_pass &= _print_verdict(tag, result.verdict)
    if args.runs > 1:
        print(f"[exp2] {args.runs} runs, {'all clean' if all_pass else 'FAILURES present'}")
    return 0 if all_pass else 1


def cmd_exp3(args, controller_cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sensors = build_sensor_array()
    models, mae = _load_models(args.models, sensors, seed=args.seed)
    tracking_limit = float(3.0 * mae[:, 3:6].mean())

    if args.interactive:
        return _exp3_interactive(args, sensors, models, controller_cfg)

    if args.scripted:
        try:
            script = load_disturbance_script(args.scripted)
        except ValueError as exc:
            print(exc, file=sys.stderr)
            return 2
    else:
        script = default_exp3_script()
    result = run_exp3(script=script, seed=args.seed, sensors=sensors, models=models,
                      controller_cfg=controller_cfg, duration_s=args.duration,
                      tracking_limit=tracking_limit)
    path = out / f"exp3-seed{args.seed}.csv"
    write_csv(result, path)
    if args.plots:
        plots.render_exp3(path)
    return 0 if _print_verdict("exp3", result.verdict) else 1


def _exp3_interactive(args, sensors, models, controller_cfg) -> int:
    """Leader-follower session steered live from the telemetry channel."""
    telemetry = TelemetryServer(port=args.telemetry_port).start()
    print(f"telemetry websocket on ws://127.0.0.1:{telemetry.port}")
    commanded = [None]

    def command_source():
        for cmd in telemetry.commands():
            if cmd.get("op") == "APPLY_FORCE":
                f = cmd.get("f", [0.0, 0.0, 0.0])
                commanded[0] = np.clip(f, [-20, -20, -60], [20, 20, 60])
        out = commanded[0]
        commanded[0] = None
        return out

    class _Publisher:
        """Wraps the sensing pipeline so every read also feeds telemetry."""

        def __init__(self, inner):
            self.inner = inner
            self._paced = time.monotonic()

        def read(self, t, contacts, want_ssim=True):
            sample = self.inner.read(t, contacts, want_ssim=want_ssim)
            telemetry.publish(telemetry_snapshot(t, None, {
                "sums": {"fx": sample.sums[0], "fy": sample.sums[1], "fz": sample.sums[2]},
            }))
            if args.realtime:
                now = time.monotonic()
                ahead = CONTROL_DT - (now - self._paced)
                if ahead > 0:
                    time.sleep(ahead)
                self._paced = time.monotonic()
            return sample

        def close(self):
            self.inner.close()

    from .experiments import InProcessSensing

    sensing = _Publisher(InProcessSensing(sensors, models, seed=args.seed))
    try:
        result = run_exp3(script=None, seed=args.seed, sensors=sensors, models=models,
                          controller_cfg=controller_cfg, duration_s=args.duration,
                          sensing=sensing, command_source=command_source)
    finally:
        telemetry.stop()
    path = Path(args.out) / "exp3-interactive.csv"
    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_csv(result, path)
    print(f"wrote {path}")
    return 0


def cmd_serve(args) -> int:
    """Array + telemetry + a live cup session driven by dashboard commands."""
    sensors = build_sensor_array()[: args.sensors]
    models, _ = _load_models(args.models, sensors, seed=args.seed)
    hub = SensorHub(len(sensors))
    service = ArrayService(sensors, models, hub=hub, host="127.0.0.1",
                           base_port=args.base_port, sample_rate=args.sample_rate,
                           mode="follow", seed=args.seed)
    telemetry = TelemetryServer(port=args.telemetry_port)
    from .control import GraspController
    from .experiments import InProcessSensing

    with service:
        telemetry.start()
        agg = service.aggregator()
        print(f"array nodes on {service.endpoints}; "
              f"telemetry on ws://127.0.0.1:{telemetry.port}")
        controller = GraspController(load_controller_config(getattr(args, 'config', None)))
        plant = Plant(sensors, PlantConfig(), dt=controller.dt)
        pour = None
        pour_i = 0
        started = time.monotonic()
        try:
            while args.duration <= 0 or time.monotonic() - started < args.duration:
                loop_start = time.monotonic()
                for cmd in telemetry.commands():
                    op = cmd.get("op")
                    if op == "ADD_MASS":
                        plant.add_rice(float(cmd.get("kg", 0.1)))
                    elif op == "START_POUR":
                        pour = pour_trajectory(dt=plant.dt)
                        pour_i = 0
                    elif op == "APPLY_FORCE":
                        f = np.clip(cmd.get("f", [0, 0, 0]), [-20, -20, -60], [20, 20, 60])
                        try:
                            plant.apply_leader_force(f)
                        except ValueError:
                            pass
                euler = None
                if pour is not None and pour_i < len(pour.angle):
                    euler = pour.euler[pour_i]
                    pour_i += 1
                out = plant.step(controller.u, arm_euler=euler)
                hub.publish(out.t, out.contacts)
                snap = agg.poll(want_ssim=controller.mode == "establishing")
                if controller.mode == "establishing":
                    _, grasped = controller.gentle_step(snap.ssim_avg)
                    if grasped:
                        plant.release_support()
                else:
                    from .control import grasp_frame_update

                    frame = grasp_frame_update(plant.arm_euler)
                    controller.stabilize_dynamic(out.t, frame, snap.fx_sum, snap.fy_sum)
                telemetry.publish(telemetry_snapshot(out.t, snap, {
                    "u": controller.u,
                    "rice_mass": out.rice_mass,
                    "crush": out.crush,
                    "slip": out.slipping,
                    "theta_y": out.theta_y,
                    "x": list(plant.arm_pos),
                }))
                ahead = plant.dt - (time.monotonic() - loop_start)
                if ahead > 0:
                    time.sleep(ahead)
        except KeyboardInterrupt:
            pass
        finally:
            agg.close()
            telemetry.stop()
    return 0


def cmd_report(args) -> int:
    status = 0
    for csv_path in args.csvs:
        try:
            out = plots.render_auto(csv_path)
            print(f"{csv_path} -> {out}")
        except (OSError, ValueError) as exc:
            print(f"{csv_path}: {exc}", file=sys.stderr)
            status = 2
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        controller_cfg = load_controller_config(args.config)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"bad controller config: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "exp1":
            return cmd_exp1(args, controller_cfg)
        if args.command == "exp2":
            return cmd_exp2(args, controller_cfg)
        if args.command == "exp3":
            return cmd_exp3(args, controller_cfg)
        if args.command == "serve":
            return cmd_serve(args)
        if args.command == "report":
            return cmd_report(args)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except (datagen.DatasetFormatError, learning.ModelFormatError, ValueError) as exc:
        print(str(exc), file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())

"""Batch entry point: run synthetic or recorded sequences, evaluate trajectories.

The `run` command drives the full pipeline (tracking frontend, staged
initialization, loop closure, Gaussian map) over a synthetic dataset or a
recorded copy of one, then writes trajectories, the map export, and a
metrics report. The `evaluate` command scores a trajectory file against a
ground-truth file. Everything is configured through a flat dotted-key
config so experiment records stay diff-able.
"""

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import Trajectory, ate_rmse, read_tum, recall_at, umeyama, write_tum
from .frontend import (PHASE_FULL, KeyframePolicy, apply_correction,
                       estimated_trajectory, flow_magnitude, make_tracker,
                       process_frame, window_snapshot)
from .gsmap import (GaussianMap, LossWeights, apply_loop_correction,
                    spawn_from_keyframe, write_vgsm)
from .imu import ImuNoiseModel
from .initialization import InitConfig
from .loopclosure import KeyframeSummary, LoopPolicy, LoopWorker
from .solver import SolveOptions, total_energy
from .synth import (SceneModel, SyntheticDataset, SyntheticProvider,
                    TrajectoryModel, make_dataset)

RECALL_THRESHOLDS_CM = (5.0, 10.0)

EXIT_OK = 0
EXIT_DIVERGED = 2
EXIT_CONFIG = 3


class ConfigError(ValueError):
    """Anything wrong with flags, config keys, or input files."""


def default_config() -> dict:
    """Every tunable of the pipeline with its default, flat dotted keys."""
    return {
        "dataset.mode": "synthetic",
        "dataset.dir": "",
        "dataset.family": "figure8",
        "dataset.amplitude": 1.5,
        "dataset.period": 30.0,
        "dataset.duration": 60.0,
        "dataset.yaw_policy": "tangent",
        "dataset.frame_rate": 25.0,
        "dataset.imu_rate": 200.0,
        "dataset.sigma_px": 0.5,
        "dataset.outlier_rate": 0.0,
        "dataset.imu_noise": True,
        "dataset.scene_half_extent": 5.0,
        "noise.gyro_noise_density": 1.7e-4,
        "noise.accel_noise_density": 2e-3,
        "noise.gyro_bias_random_walk": 1e-5,
        "noise.accel_bias_random_walk": 1e-4,
        "noise.gravity_magnitude": 9.81,
        "provider.stride": 32,
        "provider.raster_scale": 5,
        "tracker.flow_threshold": 7.0,
        "tracker.max_interval": 3.0,
        "tracker.cov_trace_threshold": 1e-4,
        "tracker.window_size": 12,
        "tracker.covis_radius": 3,
        "tracker.flow_scale": 8.0,
        "tracker.solve_iterations": 4,
        "init.n_vis_init": 10,
        "init.n_iner_init": 20,
        "init.max_iterations_vision": 30,
        "init.max_iterations_inertial": 60,
        "init.max_iterations_joint": 15,
        "init.damping": 1e-4,
        "loop.min_gap": 55,
        "loop.flow_gate": 22.0,
        "loop.ang_gate_deg": 120.0,
        "loop.align_iterations": 15,
        "loop.solve_iterations": 12,
        "loop.solve_every": 4,
        "map.stride": 4,
        "map.lambda_c": 0.8,
        "map.lambda_d": 0.2,
        "map.lambda_iso": 10.0,
        "run.seed": 0,
        "run.frame_stride": 1,
        "run.align": "se3",
        "run.out": "out",
        "run.save_dataset": False,
    }


# Canonical fixtures. Values not listed fall back to the defaults above.
PRESETS = {
    "figure8": {
        "dataset.family": "figure8",
        "dataset.amplitude": 1.5,
        "dataset.period": 30.0,
        "dataset.duration": 60.0,
    },
    "circle": {
        "dataset.family": "circle",
        "dataset.amplitude": 2.0,
        "dataset.period": 20.0,
        "dataset.duration": 40.0,
    },
    "static": {
        "dataset.family": "circle",
        "dataset.amplitude": 0.0,
        "dataset.yaw_policy": "fixed",
        "dataset.duration": 8.0,
        "run.align": "none",
    },
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: dict) -> str:
    return "\n".join(f"{k} = {_format_value(cfg[k])}" for k in sorted(cfg))


def _coerce(key: str, text: str, default):
    """Parse a config value using the default's type."""
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r} expects a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        kind = "an integer" if isinstance(default, int) else "a number"
        raise ConfigError(f"config key {key!r} expects {kind}, got {text!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat `key = value` lines into a raw string mapping, '#' comments."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, val = line.partition("=")
        if not eq or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        out[key.strip()] = val.strip()
    return out


def merge_config(cfg: dict, overrides: dict, coerce: bool = True) -> dict:
    """Apply overrides onto cfg, rejecting keys that are not known."""
    for key, val in overrides.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, val, cfg[key]) if coerce else val
    return cfg


def build_config(preset: str | None = None, config_path=None,
                 flag_overrides: dict | None = None) -> dict:
    """Defaults, then preset, then config file, then CLI flags."""
    cfg = default_config()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; "
                              f"choose from {sorted(PRESETS)}")
        merge_config(cfg, PRESETS[preset], coerce=False)
    if config_path is not None:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        merge_config(cfg, parse_config_text(text, str(config_path)))
    if flag_overrides:
        merge_config(cfg, flag_overrides, coerce=False)
    return cfg


@dataclass
class RunPlan:
    """A validated configuration turned into live pipeline objects."""

    cfg: dict
    dataset: SyntheticDataset
    provider: SyntheticProvider
    policy: KeyframePolicy
    init_cfg: InitConfig
    noise: ImuNoiseModel
    loop_policy: LoopPolicy
    weights: LossWeights
    out_dir: Path
    frame_stride: int
    align: str
    seed: int


def materialize(cfg: dict) -> RunPlan:
    """Validate the config and construct the dataset and policies.

    Raises ConfigError on any bad value; nothing is written to disk, so a
    rejected config leaves no partial outputs behind.
    """
    try:
        noise = ImuNoiseModel(
            gyro_noise_density=cfg["noise.gyro_noise_density"],
            accel_noise_density=cfg["noise.accel_noise_density"],
            gyro_bias_random_walk=cfg["noise.gyro_bias_random_walk"],
            accel_bias_random_walk=cfg["noise.accel_bias_random_walk"],
            gravity_magnitude=cfg["noise.gravity_magnitude"])
        policy = KeyframePolicy(
            flow_threshold=cfg["tracker.flow_threshold"],
            max_interval=cfg["tracker.max_interval"],
            cov_trace_threshold=cfg["tracker.cov_trace_threshold"],
            window_size=cfg["tracker.window_size"],
            covis_radius=cfg["tracker.covis_radius"],
            flow_scale=cfg["tracker.flow_scale"])
        init_cfg = InitConfig(
            n_vis_init=cfg["init.n_vis_init"],
            n_iner_init=cfg["init.n_iner_init"],
            max_iterations_vision=cfg["init.max_iterations_vision"],
            max_iterations_inertial=cfg["init.max_iterations_inertial"],
            max_iterations_joint=cfg["init.max_iterations_joint"],
            damping=cfg["init.damping"])
        loop_policy = LoopPolicy(
            min_gap=cfg["loop.min_gap"],
            flow_gate=cfg["loop.flow_gate"],
            ang_gate_deg=cfg["loop.ang_gate_deg"])
        weights = LossWeights(lambda_c=cfg["map.lambda_c"],
                              lambda_d=cfg["map.lambda_d"],
                              lambda_iso=cfg["map.lambda_iso"])

        for key in ("provider.stride", "provider.raster_scale", "map.stride",
                    "run.frame_stride", "tracker.solve_iterations",
                    "loop.align_iterations", "loop.solve_iterations",
                    "loop.solve_every"):
            if cfg[key] < 1:
                raise ConfigError(f"config key {key!r} must be >= 1")
        align = cfg["run.align"]
        if align not in ("se3", "sim3", "none"):
            raise ConfigError(f"config key 'run.align' must be se3, sim3, "
                              f"or none, got {align!r}")

        mode = cfg["dataset.mode"]
        if mode == "synthetic":
            model = TrajectoryModel(family=cfg["dataset.family"],
                                    amplitude=cfg["dataset.amplitude"],
                                    period=cfg["dataset.period"],
                                    duration=cfg["dataset.duration"],
                                    yaw_policy=cfg["dataset.yaw_policy"])
            scene = SceneModel(half_extent=cfg["dataset.scene_half_extent"])
            imu_noise = noise if cfg["dataset.imu_noise"] else None
            dataset = make_dataset(model, scene=scene, imu_noise=imu_noise,
                                   sigma_px=cfg["dataset.sigma_px"],
                                   outlier_rate=cfg["dataset.outlier_rate"],
                                   seed=cfg["run.seed"],
                                   frame_rate=cfg["dataset.frame_rate"],
                                   imu_rate=cfg["dataset.imu_rate"])
        elif mode == "recorded":
            src = cfg["dataset.dir"]
            if not src:
                raise ConfigError("recorded mode needs 'dataset.dir'")
            if not (Path(src) / "meta.json").exists():
                raise ConfigError(f"no dataset found at {src!r}")
            dataset = SyntheticDataset.load(src)
        else:
            raise ConfigError(f"config key 'dataset.mode' must be synthetic "
                              f"or recorded, got {mode!r}")
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    provider = SyntheticProvider(dataset, stride=cfg["provider.stride"],
                                 raster_scale=cfg["provider.raster_scale"])
    return RunPlan(cfg=cfg, dataset=dataset, provider=provider, policy=policy,
                   init_cfg=init_cfg, noise=noise, loop_policy=loop_policy,
                   weights=weights, out_dir=Path(cfg["run.out"]),
                   frame_stride=cfg["run.frame_stride"], align=align,
                   seed=cfg["run.seed"])


@dataclass
class RunArtifacts:
    """Everything a finished run produced, before any file is written."""

    metrics: dict
    est: Trajectory
    gt: Trajectory
    gmap: GaussianMap
    tracker: object
    worker: LoopWorker


def _gravity_error_deg(g_est: np.ndarray, g_true: np.ndarray) -> float:
    c = float(g_est @ g_true / (np.linalg.norm(g_est) * np.linalg.norm(g_true)))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def _init_diagnostics(tracker, dataset) -> dict | None:
    """Window-vs-truth gravity and scale error at the moment of init."""
    kfs = tracker.graph.keyframes
    est = np.stack([kf.state.pose.translation for kf in kfs])
    gt = np.stack([dataset.frame_pose(tracker.frame_of[kf.kid]).translation
                   for kf in kfs])
    try:
        S = umeyama(est, gt, with_scale=True)
    except ValueError:
        return None
    return {
        "gravity_err_deg": _gravity_error_deg(tracker.graph.gravity.vector(),
                                              dataset.gravity.vector()),
        "scale_err_pct": abs(S.scale - 1.0) * 100.0,
    }


def _loop_flows(provider, tracker, worker, new_kid: int, new_frame: int,
                loop_policy: LoopPolicy) -> dict:
    """Coarse-pixel flow toward every gap-eligible older keyframe."""
    flows = {}
    for s in worker.summaries:
        if new_kid - s.kid < loop_policy.min_gap:
            continue
        try:
            edge = provider.edge(s.frame_index, new_frame)
        except ValueError:
            continue
        f = flow_magnitude(edge, tracker.policy.flow_scale)
        if math.isfinite(f):
            flows[s.kid] = f
    return flows


def _spawn_keyframe_gaussians(gmap: GaussianMap, provider, frame_index: int,
                              pose, anchor: int, stride: int) -> int:
    color, depth = provider.keyframe_image(frame_index)
    h, w = depth.shape
    ks = provider.intrinsics().scaled(w, h)
    gaussians, _ = spawn_from_keyframe(color, depth, pose, ks, stride, anchor)
    gmap.insert(gaussians)
    return len(gaussians)


def _metric_block(est: Trajectory, gt: Trajectory, mode: str) -> dict:
    """ATE and the recall table; ATE is null when alignment is impossible."""
    try:
        ate = ate_rmse(est, gt, mode)
    except ValueError:
        ate = None
    recall = {}
    for thr in RECALL_THRESHOLDS_CM:
        key = str(int(thr)) if float(thr).is_integer() else repr(float(thr))
        recall[key] = recall_at(est, gt, thr, mode)
    return {"ate_rmse_cm": ate, "recall": recall}


def execute(plan: RunPlan) -> RunArtifacts:
    """Drive the pipeline over every frame and assemble the metrics.

    The workers run synchronously in a fixed order per frame: tracking,
    eviction export plus Gaussian spawning, loop summary ingestion, then at
    most one pose-graph solve whose correction is folded into the tracker
    and the map before the next frame. Shutdown drains any pending
    correction before the remaining window keyframes are flushed into the
    map, so every output reflects the last solve.
    """
    ds = plan.dataset
    provider = plan.provider
    cfg = plan.cfg
    tracker = make_tracker(provider, plan.policy, plan.init_cfg, plan.noise,
                           imu_period=1.0 / ds.imu_rate)
    tracker.solve_iterations = cfg["tracker.solve_iterations"]
    worker = LoopWorker(provider.intrinsics(), provider.edge,
                        plan.loop_policy,
                        align_iterations=cfg["loop.align_iterations"])
    gmap = GaussianMap()
    solve_opts = SolveOptions(max_iterations=cfg["loop.solve_iterations"])
    map_stride = cfg["map.stride"]

    tracking_trace = []
    pgba_trace = []
    init_diag = None
    archive_cursor = 0
    prev_time = None
    admitted_since_solve = 0

    def run_pose_graph_solve():
        nonlocal admitted_since_solve
        nodes, chain = window_snapshot(tracker)
        solved = worker.solve(nodes, chain, solve_opts)
        admitted_since_solve = 0
        if solved is None:
            return
        report, correction = solved
        apply_correction(tracker, correction)
        apply_loop_correction(gmap, correction)
        pgba_trace.append({"initial": report.initial_cost,
                           "final": report.final_cost,
                           "iterations": report.iterations})

    for f in range(0, ds.n_frames(), plan.frame_stride):
        t = ds.frame_time(f)
        samples = () if prev_time is None else ds.imu_between(prev_time, t)
        keyframed = process_frame(tracker, f, t, samples)
        prev_time = t

        if init_diag is None and tracker.phase == PHASE_FULL:
            init_diag = _init_diagnostics(tracker, ds)

        while archive_cursor < len(tracker.archive):
            row = tracker.archive[archive_cursor]
            worker.ingest_eviction(row.kid, row.pose,
                                   tracker.exported_edges[archive_cursor])
            _spawn_keyframe_gaussians(gmap, provider, row.frame_index,
                                      row.pose, row.kid, map_stride)
            archive_cursor += 1

        if keyframed:
            kf = tracker.graph.keyframes[-1]
            flows = _loop_flows(provider, tracker, worker, kf.kid, f,
                                plan.loop_policy)
            admitted = worker.ingest_summary(KeyframeSummary(
                kid=kf.kid, frame_index=f, pose=kf.state.pose.copy(),
                flows=flows, pixels=kf.pixels,
                disparities=kf.disparities.copy(),
                timestamp=kf.state.timestamp))
            if admitted is not None:
                admitted_since_solve += 1

        # solve in batches so the pose graph is not re-optimized for every
        # single admitted loop while the trajectory barely moved
        if worker.pending and admitted_since_solve >= cfg["loop.solve_every"]:
            run_pose_graph_solve()

        if keyframed:
            tracking_trace.append(total_energy(tracker.graph))

    # shutdown: drain, then flush the live window into the map
    if worker.pending:
        run_pose_graph_solve()
    for kf in tracker.graph.keyframes:
        _spawn_keyframe_gaussians(gmap, provider, tracker.frame_of[kf.kid],
                                  kf.state.pose, kf.kid, map_stride)

    est = estimated_trajectory(tracker)
    gt_poses = []
    for row in tracker.archive:
        gt_poses.append(ds.frame_pose(row.frame_index).copy())
    for kf in tracker.graph.keyframes:
        gt_poses.append(ds.frame_pose(tracker.frame_of[kf.kid]).copy())
    gt = Trajectory(est.timestamps.copy(), gt_poses)

    if not all(np.all(np.isfinite(p.translation)) for p in est.poses):
        raise RuntimeError("estimated trajectory is not finite")

    metrics = _metric_block(est, gt, plan.align)
    metrics["keyframes"] = tracker.next_kid
    metrics["loops_closed"] = worker.loops_closed
    metrics["init"] = init_diag
    metrics["energy"] = {"tracking": tracking_trace, "pgba": pgba_trace}
    return RunArtifacts(metrics=metrics, est=est, gt=gt, gmap=gmap,
                        tracker=tracker, worker=worker)


def write_outputs(out_dir: Path, art: RunArtifacts,
                  save_dataset_from=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tum(out_dir / "trajectory_est.txt", art.est,
              comment="estimated keyframe trajectory")
    write_tum(out_dir / "trajectory_gt.txt", art.gt,
              comment="ground truth at keyframe timestamps")
    write_vgsm(out_dir / "map.vgsm", art.gmap)
    with open(out_dir / "metrics.json", "w") as f:
        json.dump(art.metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    if save_dataset_from is not None:
        save_dataset_from.save(out_dir / "dataset")


def _print_metrics(metrics: dict) -> None:
    ate = metrics.get("ate_rmse_cm")
    print("ate_rmse_cm:", "unavailable" if ate is None else f"{ate:.4f}")
    for key in sorted(metrics.get("recall", {}), key=float):
        print(f"recall@{key}cm: {metrics['recall'][key]:.2f}%")
    if "keyframes" in metrics:
        print(f"keyframes: {metrics['keyframes']}")
        print(f"loops_closed: {metrics['loops_closed']}")


def _error_json(kind: str, message: str) -> None:
    json.dump({"error": kind, "message": message}, sys.stderr)
    sys.stderr.write("\n")


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as config errors, not exits."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="vislam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the pipeline on a dataset")
    run.add_argument("--config", metavar="PATH", default=None,
                     help="flat key = value config file")
    run.add_argument("--preset", metavar="NAME", default=None,
                     help="named fixture: " + ", ".join(sorted(PRESETS)))
    run.add_argument("--seed", type=int, default=None, metavar="N")
    run.add_argument("--frame-stride", type=int, default=None, metavar="N",
                     help="consume every Nth frame, keeping the full IMU stream")
    run.add_argument("--out", metavar="DIR", default=None)
    run.add_argument("--align", choices=("se3", "sim3"), default=None,
                     help="trajectory alignment used for the metrics report")
    run.add_argument("--dump-defaults", action="store_true",
                     help="print the effective config and exit")

    ev = sub.add_parser("evaluate", help="score an estimated trajectory")
    ev.add_argument("est", metavar="EST_PATH")
    ev.add_argument("gt", metavar="GT_PATH")
    ev.add_argument("--align", choices=("se3", "sim3"), default="se3")
    ev.add_argument("--out", metavar="DIR", default=".")
    return parser


def _cmd_run(args) -> int:
    flag_overrides = {}
    if args.seed is not None:
        flag_overrides["run.seed"] = args.seed
    if args.frame_stride is not None:
        flag_overrides["run.frame_stride"] = args.frame_stride
    if args.out is not None:
        flag_overrides["run.out"] = args.out
    if args.align is not None:
        flag_overrides["run.align"] = args.align
    cfg = build_config(args.preset, args.config, flag_overrides)
    if args.dump_defaults:
        print(dump_config(cfg))
        return EXIT_OK
    plan = materialize(cfg)
    try:
        art = execute(plan)
    except (RuntimeError, ValueError) as exc:
        _error_json("divergence", str(exc))
        return EXIT_DIVERGED
    write_outputs(plan.out_dir, art,
                  plan.dataset if cfg["run.save_dataset"] else None)
    _print_metrics(art.metrics)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    est = read_tum(args.est)
    gt = read_tum(args.gt)
    metrics = _metric_block(est, gt, args.align)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    _print_metrics(metrics)
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_evaluate(args)
    except (ConfigError, ValueError) as exc:
        _error_json("config", str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

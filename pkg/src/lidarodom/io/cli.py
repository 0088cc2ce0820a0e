"""Command-line entry points: run, eval, synth, inspect.

Exit codes: 0 success, 1 validation error (bad arguments, config, dataset
or file contents), 2 runtime failure. Diagnostics are a single stderr line.
"""

from __future__ import annotations

import argparse
import socket
import sys
from pathlib import Path

import numpy as np
import yaml

from ..evaluation import Trajectory, ape, map_error, timing_report
from ..pipeline import replay
from ..pointcloud import PointCloud
from .config import ConfigError, load_config, load_profile
from .dataset import load_dataset
from .formats import (
    FormatError,
    ensure_dir,
    format_pose_record,
    load_clouds,
    read_trajectory,
    write_cloud,
    write_gnuplot,
    write_results,
)
from .scenario import ScenarioScript, apply_scenario
from .synthetic import run_from_spec


class ValidationError(Exception):
    """Raised for user-correctable input problems (exit code 1)."""


def _validating(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ConfigError, FormatError, FileNotFoundError, ValueError, KeyError, TypeError, yaml.YAMLError) as e:
        raise ValidationError(str(e) or type(e).__name__) from None


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split())


# -- run ----------------------------------------------------------------------


def _effective_summary(cfg, dataset) -> dict:
    r = cfg.registration
    pre = cfg.preprocess
    fused = cfg.integrator(dataset.sources)
    return {
        "lidars": len(dataset.lidars),
        "voxel_leaf": pre.voxel_leaf if pre.voxel_enabled else "off",
        "keep_fraction": pre.keep_fraction if pre.random_enabled else "off",
        "scan_to_scan_iterations": r.scan_to_scan_iterations,
        "scan_to_submap_iterations": r.scan_to_submap_iterations,
        "workers": r.workers,
        "prior_sources": ",".join(f"{s.id}:{s.kind.value}" for s in fused.by_priority()) or "none",
        "keyframe": f"{cfg.mapping.keyframe_translation} m / {cfg.mapping.keyframe_rotation_deg} deg",
        "fga_mode": cfg.pipeline.fga_mode,
        "mode": cfg.pipeline.mode,
        "seed": cfg.pipeline.seed,
    }


def _open_stream(target: str) -> socket.socket:
    host, sep, port = target.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValidationError(f"--stream expects HOST:PORT, got {target!r}")
    try:
        return socket.create_connection((host, int(port)), timeout=5.0)
    except OSError as e:
        raise ValidationError(f"cannot connect to {target}: {e}") from None


def cmd_run(args) -> int:
    if args.config and args.profile:
        raise ValidationError("give at most one of --config and --profile")
    if args.profile:
        cfg = _validating(load_profile, args.profile)
    else:
        cfg = _validating(load_config, args.config)
    overrides = {}
    if args.mode:
        overrides["pipeline.mode"] = args.mode
    if args.seed is not None:
        overrides["pipeline.seed"] = args.seed
    if overrides:
        cfg = _validating(cfg.override, **overrides)
    dataset = _validating(load_dataset, args.dataset)
    script = _validating(ScenarioScript.load, args.scenario) if args.scenario else ScenarioScript()
    pipeline = _validating(cfg.build_pipeline, dataset)

    settings = _effective_summary(cfg, dataset)
    for k, v in settings.items():
        print(f"{k}: {v}")
    sys.stdout.flush()

    sink = _open_stream(args.stream) if args.stream else None
    out = ensure_dir(args.out)
    traj_path = out / "trajectory.txt"
    try:
        with open(traj_path, "w", encoding="utf-8") as fh:

            def on_output(o):
                line = format_pose_record(o.stamp, o.pose) + "\n"
                fh.write(line)
                if sink is not None:
                    sink.sendall(line.encode("ascii"))

            events = apply_scenario(dataset.events(), script)
            try:
                result = replay(events, pipeline, dataset.lidar_ids, cfg.pipeline.mode, on_output=on_output)
            except FormatError as e:
                raise ValidationError(str(e)) from None
    finally:
        if sink is not None:
            sink.close()

    write_cloud(out / "map.txt", pipeline.map.export())
    write_gnuplot(out / "timing.dat", {"scan": np.arange(len(result.durations)), "seconds": result.durations})
    timing = timing_report(result.durations, len(result.dropped), cfg.pipeline.scan_period)
    summary = {
        "scans_processed": pipeline.scans_processed,
        "scans_dropped": pipeline.scans_dropped,
        "scans_degraded": pipeline.scans_degraded,
        "poses_emitted": len(result.outputs),
        "map_points": len(pipeline.map),
        "timing_median": timing.median if timing.count else "nan",
        "timing_max": timing.max if timing.count else "nan",
        "realtime_fraction": timing.realtime_fraction if timing.count else "nan",
        "drops_per_second": result.drops_per_second(cfg.pipeline.scan_period),
    }
    for sid, n in sorted(pipeline.prior_histogram.items()):
        summary[f"prior.{sid}"] = n
    write_results(out / "summary.txt", summary)
    with open(out / "config.yaml", "w", encoding="utf-8") as fh:
        fh.write(cfg.dump())
    print(f"wrote {len(result.outputs)} poses to {traj_path}")
    return 0


# -- eval ---------------------------------------------------------------------


def _load_traj(path) -> Trajectory:
    return Trajectory.from_poses(read_trajectory(path, strict=True))


def _load_points(path) -> PointCloud:
    clouds = list(load_clouds(path))
    if not clouds:
        raise FormatError(path, None, "no clouds in file")
    return PointCloud(clouds[0].stamp, clouds[0].frame, np.vstack([c.points for c in clouds]))


def cmd_eval(args) -> int:
    if (args.map_est is None) != (args.map_gt is None):
        raise ValidationError("--map-est and --map-gt go together")
    est = _validating(_load_traj, args.est)
    gt = _validating(_load_traj, args.gt)
    rep = _validating(ape, est, gt, args.assoc_tol, args.alignment)
    results = {
        "ape_max": rep.max,
        "ape_mean": rep.mean,
        "ape_std": rep.std,
        "ape_rmse": rep.rmse,
        "ape_pairs": rep.count,
        "alignment": args.alignment,
    }
    if args.map_est is not None:
        m_est = _validating(_load_points, args.map_est)
        m_gt = _validating(_load_points, args.map_gt)
        me = map_error(m_est, m_gt, max_dist=args.map_max_dist)
        results["map_rmse"] = me.rmse
        results["map_icp_converged"] = int(me.converged)
    out = ensure_dir(args.out)
    write_results(out / "results.txt", results)
    write_gnuplot(out / "ape.dat", {"stamp": rep.stamps, "error": rep.errors})
    lines = [f"{k:>18}: {v:.6f}" if isinstance(v, float) else f"{k:>18}: {v}" for k, v in results.items()]
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# -- synth --------------------------------------------------------------------


def cmd_synth(args) -> int:
    def load():
        with open(args.spec, "r", encoding="utf-8") as fh:
            return yaml.safe_load(fh) or {}

    spec = _validating(load)
    run, opts = _validating(run_from_spec, spec, args.seed)
    manifest = run.write(args.out, binary=opts["binary"], gt_map_spacing=opts["gt_map_spacing"])
    n = sum(len(v) for v in run.scans.values())
    print(f"wrote {n} scans from {len(run.lidar_ids)} lidar(s) and {len(run.sources)} pose source(s) to {manifest}")
    return 0


# -- inspect ------------------------------------------------------------------


def cmd_inspect(args) -> int:
    ds = _validating(load_dataset, args.dataset)

    def summarize():
        print(f"dataset: {Path(args.dataset).resolve()}")
        print(f"scan_period: {ds.scan_period}")
        stats: dict[str, list] = {}
        for ev in ds.events():
            s = stats.setdefault(ev.source_id, [ev.kind, 0, ev.time, ev.time, 0])
            s[1] += 1
            s[3] = ev.time
            if ev.kind == "lidar":
                s[4] += len(ev.payload)
        for sid, (kind, n, t0, t1, pts) in stats.items():
            rate = (n - 1) / (t1 - t0) if n > 1 and t1 > t0 else float("nan")
            extra = f" mean_points {pts / n:.0f}" if kind == "lidar" else ""
            print(f"  {sid:<10} {kind:<9} events {n:<6} span [{t0:.3f}, {t1:.3f}] rate {rate:.2f} Hz{extra}")
        if ds.gt_trajectory:
            print(f"ground_truth trajectory: {ds.gt_trajectory}")
        if ds.gt_map:
            print(f"ground_truth map: {ds.gt_map}")

    _validating(summarize)
    return 0


# -- entry point --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lidarodom", description="Multi-sensor lidar odometry: replay, evaluation and synthetic data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="replay a dataset through the odometry pipeline")
    r.add_argument("--config", help="YAML pipeline config")
    r.add_argument("--profile", help="shipped profile name (default, husky, spot)")
    r.add_argument("--dataset", required=True, help="dataset manifest (YAML)")
    r.add_argument("--scenario", help="failure-injection script (YAML)")
    r.add_argument("--mode", choices=("deterministic", "paced"))
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--stream", metavar="HOST:PORT", help="also send each pose record as a line over TCP")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="APE and map error against ground truth")
    e.add_argument("--est", required=True, help="estimated trajectory")
    e.add_argument("--gt", required=True, help="ground-truth trajectory")
    e.add_argument("--map-est", help="estimated map cloud")
    e.add_argument("--map-gt", help="ground-truth map cloud")
    e.add_argument("--alignment", choices=("se3", "none"), default="se3")
    e.add_argument("--assoc-tol", type=float, default=0.05, help="stamp association tolerance [s]")
    e.add_argument("--map-max-dist", type=float, default=1.0, help="ICP correspondence cutoff [m]")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True, help="generator spec (YAML)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("inspect", help="summarize a dataset")
    i.add_argument("dataset", help="dataset manifest (YAML)")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ValidationError as e:
        print(f"lidarodom: error: {_one_line(e)}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("lidarodom: interrupted", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report any runtime failure on one line
        print(f"lidarodom: runtime failure: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command line interface.

    flowvel simulate --out DIR [--set key=value ...]
    flowvel estimate --data DIR --out DIR [--depth-every N]
    flowvel evaluate --data DIR --out DIR [--max-rmse X] [--no-figures]
    flowvel sweep --param KEY --values A,B,... --out DIR

Exit codes: 0 success, 1 usage/config error, 2 malformed or missing data,
3 evaluation exceeded an acceptance threshold (--max-rmse).

Every command is deterministic: rerunning with the same config and seed
reproduces output files byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from .config import RunConfig
from .dataset import DatasetError, read_dataset, write_dataset, write_planes
from .depth import TVRepairConfig, repaired_depth
from .estimator import VelocityPipeline
from .evaluate import evaluate, run_estimator
from .frontend import FlowField, StaggerBuffer
from .geometry import CameraIntrinsics, build_angle_grid
from .simulate import simulate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_THRESHOLD = 3

ESTIMATES_HEADER = ["t_s", "v_raw_median", "v_smoothed", "v_corrected",
                    "n_valid_fields", "degenerate_flag"]


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; remap to this tool's code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    return cfg


def _add_config_args(p) -> None:
    p.add_argument("--config", help="key=value config file (see RunConfig)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry (repeatable)")


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    plan = cfg.plan()
    imu_t, imu_a, imu_g = None, None, None
    if args.raw_imu:
        from .simulate import simulate_imu

        imu_t, imu_a, imu_g = simulate_imu(plan)
    write_dataset(
        simulate(plan),
        args.out,
        width_px=plan.intrinsics.width_px,
        height_px=plan.intrinsics.height_px,
        hfov_rad=plan.intrinsics.hfov_rad,
        vfov_rad=plan.intrinsics.vfov_rad,
        fps=plan.fps,
        imu_rate_hz=plan.imu_rate_hz if args.raw_imu else plan.fps,
        imu_t=imu_t,
        imu_accel=imu_a,
        imu_gyro=imu_g,
        truth_depth_every=args.depth_every,
    )
    cfg.save(os.path.join(args.out, "run_config.txt"))
    print(f"wrote {plan.n_frames} frames to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate


def _write_estimates_csv(path: str, run) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(ESTIMATES_HEADER)
        for i in range(run.n_estimates):
            wr.writerow([
                repr(float(run.t[i])),
                repr(float(run.v_median[i])),
                repr(float(run.v_smoothed[i])),
                repr(float(run.v_corrected[i])),
                int(run.n_valid_fields[i]),
                int(run.degenerate[i]),
            ])
    os.replace(tmp, path)


def _write_meta(path: str, run, pipeline) -> None:
    lines = {
        "group_delay_s": repr(float(run.group_delay_s)),
        "smoothed_delay_s": repr(float(run.smoothed_delay_s)),
        "warmup_frames": pipeline.warmup_frames,
        "warmup_end_s": repr(float(run.warmup_end_s())),
        "n_estimates": run.n_estimates,
        "n_degenerate": int(run.degenerate.sum()),
        "fps": repr(float(run.fps)),
        "n_fields": pipeline.bank.n_fields,
        "field_layout": "x".join(str(v) for v in pipeline.bank.layout),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for k, v in lines.items():
            f.write(f"{k}={v}\n")
    os.replace(tmp, path)


def _estimate_run(args, collect_fields=False):
    """Shared replay: (dataset, grid, config, pipeline, run)."""
    ds = read_dataset(args.data)
    cfg = _load_config(args)
    intr = CameraIntrinsics(ds.width_px, ds.height_px, ds.hfov_rad, ds.vfov_rad)
    grid = build_angle_grid(intr)
    overrides = {}
    if ds.flow_type != cfg.flow_combine:
        overrides["flow_combine"] = ds.flow_type
    if overrides:
        cfg = cfg.with_overrides([f"estimator.flow_combine={overrides['flow_combine']}"])
    est_cfg = cfg.estimator_config(fps=ds.fps)
    pipeline = VelocityPipeline(grid, est_cfg)
    run = run_estimator(ds.iter_frames(), grid, pipeline=pipeline,
                        collect_fields=collect_fields)
    return ds, grid, cfg, pipeline, run


def _write_depth_maps(outdir, ds, grid, cfg, run, every: int) -> int:
    """Estimated (tv-repaired) depth planes for every Nth staggered window."""
    os.makedirs(outdir, exist_ok=True)
    est_cfg = cfg.estimator_config(fps=ds.fps)
    buf = StaggerBuffer(est_cfg.stagger)
    sflow = est_cfg.stagger.flow_stagger_frames
    tv_cfg = TVRepairConfig()
    n_written = 0
    for i in range(ds.n_frames):
        planes = ds.flow_at(i)
        window = buf.push(FlowField(u=planes[0], w=planes[1], t=i / ds.fps))
        if window is None:
            continue
        k = i - sflow
        if k % every != 0:
            continue
        t_center = (k + sflow // 2) / ds.fps
        t_query = t_center + run.smoothed_delay_s
        if not (run.t[0] <= t_query <= run.t[-1]):
            continue
        v_hat = float(np.interp(t_query, run.t, run.v_corrected))
        dm = repaired_depth(window, grid, v_hat, tv_cfg=tv_cfg)
        plane = np.where(dm.mask, dm.d, 0.0).astype(np.float32)
        write_planes(os.path.join(outdir, f"{k:06d}.flvr"), plane)
        n_written += 1
    return n_written


def cmd_estimate(args) -> int:
    ds, grid, cfg, pipeline, run = _estimate_run(args)
    os.makedirs(args.out, exist_ok=True)
    _write_estimates_csv(os.path.join(args.out, "estimates.csv"), run)
    _write_meta(os.path.join(args.out, "estimates_meta.txt"), run, pipeline)
    msg = f"wrote {run.n_estimates} estimates to {args.out}"
    if args.depth_every > 0:
        n = _write_depth_maps(os.path.join(args.out, "depth"), ds, grid, cfg,
                              run, args.depth_every)
        msg += f" (+{n} depth maps)"
    print(msg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    ds, grid, cfg, pipeline, run = _estimate_run(args)
    if not run.has_truth:
        raise DatasetError(f"{args.data}: truth.csv missing or incomplete; "
                           "cannot evaluate")
    depth_frames = None
    depth_stride = int(ds.manifest.get("truth_depth_every", 0))
    if args.depth and depth_stride > 0:
        depth_frames = ds.iter_frames()
    report = evaluate(run, depth_frames=depth_frames, grid=grid,
                      depth_every=max(depth_stride, 1))

    os.makedirs(args.out, exist_ok=True)
    _write_estimates_csv(os.path.join(args.out, "estimates.csv"), run)
    _write_meta(os.path.join(args.out, "estimates_meta.txt"), run, pipeline)
    # report.txt stays byte-stable across reruns; wall-clock timing goes to
    # stdout, and to files only on explicit request
    report_path = os.path.join(args.out, "report.txt")
    tmp = report_path + ".tmp"
    with open(tmp, "w") as f:
        for line in report.lines(include_timing=False):
            f.write(line + "\n")
    os.replace(tmp, report_path)
    for line in report.lines():
        print(line)

    if args.figures:
        from . import plots

        plots.plot_velocity(os.path.join(args.out, "velocity.png"), run, report)
        if report.depth:
            plots.plot_depth_scores(os.path.join(args.out, "depth_error.png"),
                                    report.depth)
    if args.timing:
        from . import plots

        with open(os.path.join(args.out, "timing.txt"), "w") as f:
            for name in sorted(report.timing_mean_ms):
                f.write(f"{name},{float(report.timing_mean_ms[name])!r},"
                        f"{float(report.timing_p95_ms[name])!r}\n")
        plots.plot_timing(os.path.join(args.out, "timing.png"), report)

    if args.max_rmse is not None and report.rmse_corrected > args.max_rmse:
        print(f"rmse {report.rmse_corrected:.5f} exceeds --max-rmse "
              f"{args.max_rmse}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def cmd_sweep(args) -> int:
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ValueError("--values is empty")
    base = _load_config(args)
    rows = []
    for val in values:
        cfg = base.with_overrides([f"{args.param}={val}"])
        sub = os.path.join(args.out, val.replace("/", "_"))
        data_dir = os.path.join(sub, "data")
        plan = cfg.plan()
        write_dataset(
            simulate(plan), data_dir,
            width_px=plan.intrinsics.width_px,
            height_px=plan.intrinsics.height_px,
            hfov_rad=plan.intrinsics.hfov_rad,
            vfov_rad=plan.intrinsics.vfov_rad,
            fps=plan.fps,
        )
        ds = read_dataset(data_dir)
        intr = CameraIntrinsics(ds.width_px, ds.height_px, ds.hfov_rad, ds.vfov_rad)
        grid = build_angle_grid(intr)
        run = run_estimator(ds.iter_frames(), grid, cfg.estimator_config(fps=ds.fps))
        report = evaluate(run)
        _write_estimates_csv(os.path.join(sub, "estimates.csv"), run)
        rows.append({
            "value": val,
            "rmse_median": report.rmse_median,
            "rmse_corrected": report.rmse_corrected,
            "convergence_time_s": report.convergence_time_s,
            "n_degenerate": report.n_degenerate,
        })
        print(f"{args.param}={val}: rmse {report.rmse_corrected:.5f}, "
              f"degenerate {report.n_degenerate}")
    path = os.path.join(args.out, "sweep.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0]))
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v)
                         for k, v in row.items()})
    os.replace(tmp, path)
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="flowvel",
                description="forward velocity and depth from flow + accelerometer")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="render a synthetic dataset")
    _add_config_args(ps)
    ps.add_argument("--out", required=True)
    ps.add_argument("--depth-every", type=int, default=0, metavar="N",
                    help="also store truth depth every N frames")
    ps.add_argument("--raw-imu", action="store_true",
                    help="write the high-rate IMU trace instead of frame means")
    ps.set_defaults(fn=cmd_simulate)

    pe = sub.add_parser("estimate", help="run the estimator over a dataset")
    _add_config_args(pe)
    pe.add_argument("--data", required=True)
    pe.add_argument("--out", required=True)
    pe.add_argument("--depth-every", type=int, default=0, metavar="N",
                    help="write repaired depth maps every N frames")
    pe.set_defaults(fn=cmd_estimate)

    pv = sub.add_parser("evaluate", help="estimate plus scoring and figures")
    _add_config_args(pv)
    pv.add_argument("--data", required=True)
    pv.add_argument("--out", required=True)
    pv.add_argument("--max-rmse", type=float, default=None,
                    help="exit 3 if corrected rmse exceeds this")
    pv.add_argument("--no-depth", dest="depth", action="store_false",
                    help="skip depth scoring even when truth depth is stored")
    pv.add_argument("--no-figures", dest="figures", action="store_false")
    pv.add_argument("--timing", action="store_true",
                    help="also write timing.txt/timing.png (wall-clock "
                         "measurements; not byte-reproducible)")
    pv.set_defaults(fn=cmd_evaluate, depth=True, figures=True, timing=False)

    pw = sub.add_parser("sweep", help="run a config sweep end to end")
    _add_config_args(pw)
    pw.add_argument("--param", required=True, help="config key to sweep")
    pw.add_argument("--values", required=True, help="comma-separated values")
    pw.add_argument("--out", required=True)
    pw.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DatasetError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

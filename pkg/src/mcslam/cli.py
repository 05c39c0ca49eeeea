"""Command-line entry point: ``slam simulate | run | eval | config new | scenario``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

from .evaluation import evaluate, read_tum, write_tum
from .pipeline import PRESETS, PipelineError, preset_config, run_pipeline
from .simulator import SCENARIOS, PathCommand, RobotModel, World, default_robot, scenario, simulate


class CliError(Exception):
    pass


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_simulate(args) -> int:
    world = World.from_text(_read(args.world))
    path = PathCommand.from_text(_read(args.path))
    robot = RobotModel.from_text(_read(args.robot)) if args.robot else default_robot()
    result = simulate(world, robot, path, args.seed)
    _write(args.out, result.dataset_text())
    _write(args.gt, write_tum(result.ground_truth))
    return 0


def cmd_run(args) -> int:
    result = run_pipeline(
        _read(args.config),
        _read(args.dataset),
        traj_path=args.traj,
        graph_path=args.graph,
        map_path=args.map,
        gt_text=_read(args.gt) if args.gt else None,
        save_graph_every=args.save_graph_every,
    )
    summary = {"packets": result.packets, "frame_rate": result.frame_rate,
               "degenerate_steps": result.degenerate_steps}
    if result.report is not None:
        summary.update(result.report.as_dict())
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    gt = read_tum(_read(args.gt))
    est = read_tum(_read(args.est))
    report = evaluate(gt, est, delta=args.delta, align=not args.no_align, max_dt=args.max_dt)
    out = report.as_dict()
    out.pop("frame_rate")
    print(json.dumps(out))
    return 0


def cmd_config_new(args) -> int:
    sys.stdout.write(preset_config(args.preset))
    return 0


def cmd_scenario(args) -> int:
    world, path = scenario(args.name)
    robot = default_robot(dual=not args.single)
    os.makedirs(args.out_dir, exist_ok=True)
    files = {"world.json": world.to_text(), "path.json": path.to_text(), "robot.json": robot.to_text()}
    for name, text in files.items():
        _write(os.path.join(args.out_dir, name), text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slam", description="Multi-cue 2D graph SLAM toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a dataset and ground truth")
    s.add_argument("--world", required=True)
    s.add_argument("--path", required=True)
    s.add_argument("--robot", help="robot file; default is the dual-rangefinder robot")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="dataset JSON-lines output")
    s.add_argument("--gt", required=True, help="ground-truth TUM output")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run a pipeline config on a dataset")
    r.add_argument("--config", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--traj", required=True, help="estimated trajectory (TUM)")
    r.add_argument("--graph", help="final pose graph (JSON-lines)")
    r.add_argument("--map", help="map rendering (SVG)")
    r.add_argument("--gt", help="ground truth (TUM) for a metric report")
    r.add_argument("--save-graph-every", type=int, default=0, metavar="N",
                   help="write graph_<step>.json next to --graph every N packets")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="ATE / RPE of a trajectory against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--est", required=True)
    e.add_argument("--delta", type=int, default=1, help="RPE frame offset")
    e.add_argument("--no-align", action="store_true", help="skip rigid alignment before ATE")
    e.add_argument("--max-dt", type=float, default=0.05, help="timestamp association window")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("config", help="config file helpers")
    csub = c.add_subparsers(dest="config_command", required=True)
    cn = csub.add_parser("new", help="print a preset config")
    cn.add_argument("--preset", required=True, choices=PRESETS)
    cn.set_defaults(func=cmd_config_new)

    sc = sub.add_parser("scenario", help="write a built-in world, path and robot file")
    sc.add_argument("name", choices=sorted(SCENARIOS))
    sc.add_argument("--out-dir", required=True)
    sc.add_argument("--single", action="store_true", help="front rangefinder only")
    sc.set_defaults(func=cmd_scenario)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # reported as one machine-parsable line
        cause = exc.cause if isinstance(exc, PipelineError) else exc
        err = {"error": type(cause).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

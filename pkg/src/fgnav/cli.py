"""Command-line entry points: distance-map, localize, mpc and navigate."""

from __future__ import annotations

import csv
import dataclasses
import glob
import json
import math
import os
import sys
from typing import List, Optional

import click
import numpy as np

from . import config as cfgmod
from .core import Se2Pose
from .distance import DistanceField, GridMap, build_distance_field, load_map
from .localizer import OdometryPrior, Scan, localize
from .mpc import PlanningError, blocked_cells, mpc_step, plan_global


def _floats(text: str, n_min: int, n_max: int, what: str) -> List[float]:
    try:
        vals = [float(v) for v in text.replace(" ", "").split(",") if v != ""]
    except ValueError:
        raise click.BadParameter(f"{what} must be comma-separated numbers, got {text!r}")
    if not n_min <= len(vals) <= n_max:
        raise click.BadParameter(f"{what} needs {n_min}..{n_max} values, got {len(vals)}")
    return vals


def _pose(text: str, what: str) -> Se2Pose:
    return Se2Pose(*_floats(text, 3, 3, what))


def _dump(obj) -> None:
    click.echo(json.dumps(obj, indent=2))


def _planning_map(grid: GridMap) -> GridMap:
    # unknown space counts as occupied for planning and the potential
    cells = np.where(grid.cells == 0, 0, 1).astype(np.int8)
    return GridMap(cells, grid.resolution, grid.origin)


# -- distance-map ------------------------------------------------------------------

@click.group(name="distance-map")
def distance_map():
    """Build and dump distance fields."""


@distance_map.command("build")
@click.option("--map", "map_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="map YAML (map_server format)")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False),
              help="output DFLD file")
@click.option("--dmax", default=10.0, show_default=True, type=float, help="clamp distance [m]")
@click.option("--unknown-as-occupied", is_flag=True, help="treat unknown cells as obstacles")
def distance_map_build(map_path, out_path, dmax, unknown_as_occupied):
    """Compute the Euclidean distance field of a map and write it as DFLD."""
    grid = load_map(map_path)
    df = build_distance_field(grid, dmax, unknown_as_occupied=unknown_as_occupied)
    df.save(out_path)
    h, w = df.shape
    _dump({"out": out_path, "width": w, "height": h, "resolution": df.resolution,
           "origin": [df.origin.x, df.origin.y, df.origin.theta], "d_max": df.d_max})


# -- localize ----------------------------------------------------------------------

def _read_scan(path: str) -> Scan:
    with open(path) as fh:
        data = json.load(fh)
    if "points" in data:
        return Scan(np.asarray(data["points"], dtype=float).reshape(-1, 2),
                    float(data.get("range_max", data.get("max_range", 10.0))))
    try:
        return Scan.from_ranges(float(data["angle_min"]), float(data["angle_increment"]),
                                [math.inf if r is None else r for r in data["ranges"]],
                                float(data["range_max"]))
    except KeyError as exc:
        raise click.BadParameter(f"scan file lacks {exc}; give 'points' or polar ranges")


@click.command(name="localize")
@click.option("--map", "map_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scan", "scan_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="scan JSON: {angle_min, angle_increment, range_max, ranges} or {points}")
@click.option("--prior", required=True, help='predicted pose "x,y,theta"')
@click.option("--cfg", "cfg_path", type=click.Path(exists=True, dir_okay=False), help="loc.toml")
def localize_cmd(map_path, scan_path, prior, cfg_path):
    """Register one scan against the map, starting from the prior pose."""
    loc_cfg, solver, info, d_max = cfgmod.localizer_from_dict(cfgmod.load_toml(cfg_path))
    grid = load_map(map_path)
    df = build_distance_field(grid, d_max, unknown_as_occupied=False)
    scan = _read_scan(scan_path)
    pose, rep = localize(scan, OdometryPrior(_pose(prior, "--prior"), info), df, loc_cfg, solver)
    _dump({
        "pose": {"x": pose.x, "y": pose.y, "theta": pose.theta},
        "iterations": rep.iterations,
        "retained_endpoints": rep.retained_endpoints,
        "cost": rep.cost,
        "converged": rep.converged,
        "stalled": rep.stalled,
        "fallback": rep.fallback,
    })


# -- mpc -----------------------------------------------------------------------------

@click.group(name="mpc")
def mpc_cmd():
    """Model predictive control tools."""


@mpc_cmd.command("solve")
@click.option("--map", "map_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--start", required=True, help='start pose "x,y,theta"')
@click.option("--goal", required=True, help='goal "x,y" or "x,y,theta"')
@click.option("--obstacles", "obs_path", type=click.Path(exists=True, dir_okay=False),
              help="unmapped obstacles JSON: {discs: [{x, y, radius}], polygons: [...], points: [...]}")
@click.option("--cfg", "cfg_path", type=click.Path(exists=True, dir_okay=False), help="mpc.toml")
@click.option("--plot", "plot_path", type=click.Path(dir_okay=False), help="write an SVG figure")
def mpc_solve(map_path, start, goal, obs_path, cfg_path, plot_path):
    """Plan on the static map and solve one MPC horizon from the start pose."""
    from .sim import _snap_free, obstacle_points, obstacles_from_json

    data = cfgmod.load_toml(cfg_path)
    mcfg = cfgmod.mpc_from_dict(data)
    ccfg = cfgmod.mpc_solver_from_dict(data)
    planner = cfgmod.planner_from_dict(data)
    grid = load_map(map_path)
    x0 = _pose(start, "--start")
    g = _floats(goal, 2, 3, "--goal")
    heading = g[2] if len(g) == 3 else None

    pts = np.zeros((0, 2))
    if obs_path:
        with open(obs_path) as fh:
            obs = json.load(fh)
        pts = obstacle_points(obstacles_from_json(obs), 0.5 * grid.resolution)
        if obs.get("points"):
            pts = np.vstack([pts, np.asarray(obs["points"], dtype=float).reshape(-1, 2)])

    plan_map = _planning_map(grid)
    blocked = blocked_cells(plan_map, planner["inflation_radius"])
    try:
        s = _snap_free(plan_map, blocked, (x0.x, x0.y))
        path = plan_global(plan_map, s, g[:2], planner["inflation_radius"], smooth=True)
    except PlanningError as exc:
        raise click.ClickException(f"planning failed: {exc}")
    if not np.allclose(path.waypoints[0], [x0.x, x0.y]):
        path = dataclasses.replace(path, waypoints=np.vstack([[x0.x, x0.y], path.waypoints]))
    static = build_distance_field(grid, planner["d_max"], unknown_as_occupied=True)
    field = static.with_points(pts) if len(pts) else static
    res = mpc_step(x0, path, field, mcfg, ccfg, goal_heading=heading)

    report = res.report.to_dict()
    report.update({
        "u0": [res.u0.v, res.u0.w],
        "raw_u0": [res.raw_u0.v, res.raw_u0.w],
        "clamp_fired": res.clamp_fired,
        "min_distance_initial": float(np.min(field.distance_at(res.initial_states[1:, :2]))),
        "min_distance_optimized": float(np.min(field.distance_at(res.states[1:, :2]))),
    })
    if plot_path:
        from .plotting import plot_mpc

        plot_mpc(plot_path, grid, res.states, res.controls, res.initial_states,
                 res.reference.x_ref, pts, mcfg.T_s)
    _dump({"controls": res.controls.tolist(), "states": res.states.tolist(), "report": report})


# -- navigate --------------------------------------------------------------------

@click.group(name="navigate")
def navigate():
    """Closed-loop navigation episodes and their statistics."""


@navigate.command("run")
@click.option("--map", "map_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--goals", "goals_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="goals JSON: {goals: [{x, y, theta?}], loop: bool}")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--episodes", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--obstacles", "obs_path", type=click.Path(exists=True, dir_okay=False),
              help="unmapped obstacles present in the world")
@click.option("--cfg", "cfg_path", type=click.Path(exists=True, dir_okay=False), help="nav.toml")
@click.option("--start", default=None, help='start pose "x,y,theta" (default: first goal)')
def navigate_run(map_path, goals_path, seed, episodes, out_dir, obs_path, cfg_path, start):
    """Run episodes and write one NavRun JSON each plus aggregate.csv."""
    from .sim import SimWorld, episode_seeds, obstacles_from_json, run_navigation, write_aggregate_csv
    from .worlds import goal_sequence, load_goals

    nav, lidar, odom = cfgmod.nav_from_dict(cfgmod.load_toml(cfg_path))
    grid = load_map(map_path)
    goals, loop, start_pose = load_goals(goals_path)
    if start:
        start_pose = _pose(start, "--start")
    start_pose, todo = goal_sequence(goals, loop, start_pose)
    obstacles = []
    if obs_path:
        with open(obs_path) as fh:
            obstacles = obstacles_from_json(json.load(fh))
    os.makedirs(out_dir, exist_ok=True)
    runs = []
    for ep, s in enumerate(episode_seeds(seed, episodes)):
        world = SimWorld(grid, obstacles, lidar, odom, rng_seed=s)
        run = run_navigation(world, todo, start_pose, nav)
        with open(os.path.join(out_dir, f"episode_{ep:03d}.json"), "w") as fh:
            fh.write(run.to_json())
        reached = sum(e["type"] == "goal_reached" for e in run.events)
        click.echo(f"episode {ep}: {reached}/{len(todo)} goals reached, "
                   f"{len(run.gt_trajectory)} steps", err=True)
        runs.append(run)
    write_aggregate_csv(os.path.join(out_dir, "aggregate.csv"), runs)


def _stat(values: List[float]) -> str:
    a = np.asarray(values, dtype=float)
    mean, std = float(a.mean()), float(a.std())
    cv = 100.0 * std / mean if mean else float("nan")
    return f"{mean:8.3f} ± {std:6.3f} ({cv:5.2f}%)"


@navigate.command("report")
@click.argument("runs_dir", type=click.Path(exists=True, file_okay=False))
def navigate_report(runs_dir):
    """Print mean ± std tables per segment from a run directory."""
    path = os.path.join(runs_dir, "aggregate.csv")
    if not os.path.exists(path):
        raise click.ClickException(f"{path} not found; run 'navigate run' first")
    rows = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["segment"]), []).append(r)
    aborted = 0
    episodes = sorted(glob.glob(os.path.join(runs_dir, "episode_*.json")))
    for ep in episodes:
        with open(ep) as fh:
            aborted += sum(e["type"] == "aborted" for e in json.load(fh)["events"])
    click.echo(f"{len(episodes)} episodes, {aborted} aborted goals")
    click.echo("")
    click.echo(f"{'segment':>7}  {'n':>3}  {'path length [m]':>30}  {'duration [s]':>30}")
    for seg in sorted(rows):
        r = rows[seg]
        click.echo(f"{seg:>7}  {len(r):>3}  {_stat([float(x['path_length_m']) for x in r]):>30}  "
                   f"{_stat([float(x['duration_s']) for x in r]):>30}")
    click.echo("")
    click.echo(f"{'segment':>7}  {'APE trans [m]':>30}  {'APE rot [rad]':>30}  {'min clearance [m]':>18}")
    for seg in sorted(rows):
        r = rows[seg]
        clear = min(float(x["min_clearance"]) for x in r)
        click.echo(f"{seg:>7}  {_stat([float(x['ape_trans_mean']) for x in r]):>30}  "
                   f"{_stat([float(x['ape_rot_mean']) for x in r]):>30}  {clear:>18.3f}")


@navigate.command("plot")
@click.option("--map", "map_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--run", "run_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def navigate_plot(map_path, run_path, out_path):
    """Render one episode as SVG."""
    from .plotting import plot_run
    from .sim import NavRun

    with open(run_path) as fh:
        run = NavRun.from_dict(json.load(fh))
    plot_run(out_path, load_map(map_path), run)


def main(argv: Optional[List[str]] = None):  # pragma: no cover
    """Dispatch on the program name, for ``python -m fgnav.cli <tool> ...``."""
    argv = list(sys.argv[1:] if argv is None else argv)
    tools = {"distance-map": distance_map, "localize": localize_cmd, "mpc": mpc_cmd,
             "navigate": navigate}
    if not argv or argv[0] not in tools:
        raise SystemExit(f"usage: python -m fgnav.cli {{{','.join(tools)}}} ...")
    tools[argv[0]].main(argv[1:], prog_name=argv[0])


if __name__ == "__main__":  # pragma: no cover
    main()

"""Synthetic maps used by the examples, the CLI defaults and the tests."""

from __future__ import annotations

import json
import os
from importlib import resources
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import Se2Pose
from .distance import FREE, OCCUPIED, UNKNOWN, GridMap, load_map, save_map


def _blank(width_m: float, height_m: float, resolution: float) -> GridMap:
    w = int(round(width_m / resolution))
    h = int(round(height_m / resolution))
    origin = Se2Pose(-0.5 * w * resolution, -0.5 * h * resolution, 0.0)
    return GridMap(np.full((h, w), FREE, dtype=np.int8), resolution, origin)


def fill_rect(grid: GridMap, x0: float, y0: float, x1: float, y1: float, value: int = OCCUPIED):
    """Set every cell whose center lies in the world-aligned box to ``value``.

    Assumes an unrotated origin, which holds for all maps built here.
    """
    res = grid.resolution
    c0 = int(np.ceil((x0 - grid.origin.x) / res - 0.5))
    c1 = int(np.floor((x1 - grid.origin.x) / res - 0.5))
    r0 = int(np.ceil((y0 - grid.origin.y) / res - 0.5))
    r1 = int(np.floor((y1 - grid.origin.y) / res - 0.5))
    c0, r0 = max(c0, 0), max(r0, 0)
    c1, r1 = min(c1, grid.width - 1), min(r1, grid.height - 1)
    if c1 >= c0 and r1 >= r0:
        grid.cells[r0 : r1 + 1, c0 : c1 + 1] = value


def _box_walls(grid: GridMap, half_w: float, half_h: float, thickness: float):
    fill_rect(grid, -half_w - thickness, -half_h - thickness, half_w + thickness, -half_h)
    fill_rect(grid, -half_w - thickness, half_h, half_w + thickness, half_h + thickness)
    fill_rect(grid, -half_w - thickness, -half_h, -half_w, half_h)
    fill_rect(grid, half_w, -half_h, half_w + thickness, half_h)


def square_room(side: float = 6.0, resolution: float = 0.05, wall: float = 0.1) -> GridMap:
    """An empty square room centered on the world origin, interior ``side`` meters."""
    margin = 2 * wall + 4 * resolution
    grid = _blank(side + 2 * margin, side + 2 * margin, resolution)
    fill_rect(grid, -side / 2 - 2 * margin, -side / 2 - 2 * margin,
              side / 2 + 2 * margin, side / 2 + 2 * margin, UNKNOWN)
    fill_rect(grid, -side / 2, -side / 2, side / 2, side / 2, FREE)
    _box_walls(grid, side / 2, side / 2, wall)
    return grid


def circuit_map(resolution: float = 0.05) -> GridMap:
    """A 12 m x 8 m hall with a central block, giving a loop of 2.5 m corridors.

    The block interior is unknown space. Short wall stubs and two pillars break
    the corridor symmetry for the scan matcher without narrowing the loop
    below 2 m.
    """
    grid = _blank(12.8, 8.8, resolution)
    fill_rect(grid, -6.4, -4.4, 6.4, 4.4, UNKNOWN)
    fill_rect(grid, -6.0, -4.0, 6.0, 4.0, FREE)
    _box_walls(grid, 6.0, 4.0, 0.15)
    # central block: occupied rim, unknown core
    fill_rect(grid, -3.5, -1.5, 3.5, 1.5)
    fill_rect(grid, -3.3, -1.3, 3.3, 1.3, UNKNOWN)
    # stubs on the outer walls
    fill_rect(grid, -1.0, -4.0, -0.8, -3.6)
    fill_rect(grid, 1.8, 3.5, 2.0, 4.0)
    fill_rect(grid, 5.5, -0.4, 6.0, -0.2)
    fill_rect(grid, -6.0, 0.6, -5.6, 0.8)
    # pillars in the corners, away from the goal poses
    fill_rect(grid, -5.6, -3.6, -5.3, -3.3)
    fill_rect(grid, 5.3, 3.3, 5.6, 3.6)
    return grid


CIRCUIT_GOALS: List[dict] = [
    {"x": -4.5, "y": -2.6, "theta": 0.0},
    {"x": 4.5, "y": -2.6},
    {"x": 4.5, "y": 2.6},
    {"x": -4.5, "y": 2.6},
]


def write_circuit(folder: str) -> Tuple[str, str]:
    """Write ``circuit.yaml``/``circuit.pgm`` and ``circuit_goals.json``."""
    os.makedirs(folder, exist_ok=True)
    yaml_path = os.path.join(folder, "circuit.yaml")
    save_map(circuit_map(), yaml_path)
    goals_path = os.path.join(folder, "circuit_goals.json")
    with open(goals_path, "w") as fh:
        json.dump({"goals": CIRCUIT_GOALS, "loop": True}, fh, indent=2)
        fh.write("\n")
    return yaml_path, goals_path


def shipped_path(name: str) -> str:
    """Filesystem path of a file in the package's data folder."""
    return str(resources.files("fgnav") / "data" / name)


def load_circuit() -> GridMap:
    return load_map(shipped_path("circuit.yaml"))


def load_goals(path: str) -> Tuple[List[Tuple[float, float, Optional[float]]], bool, Optional[Se2Pose]]:
    """Read ``{goals: [{x, y, theta?}], loop: bool, start?: {x, y, theta?}}``."""
    with open(path) as fh:
        data = json.load(fh)
    goals = [(float(g["x"]), float(g["y"]), None if g.get("theta") is None else float(g["theta"]))
             for g in data["goals"]]
    if not goals:
        raise ValueError("goal list is empty")
    start = data.get("start")
    start_pose = None
    if start is not None:
        start_pose = Se2Pose(float(start["x"]), float(start["y"]), float(start.get("theta") or 0.0))
    return goals, bool(data.get("loop", False)), start_pose


def goal_sequence(goals: Sequence[Tuple[float, float, Optional[float]]], loop: bool,
                  start: Optional[Se2Pose] = None):
    """Start pose and the ordered goals to visit.

    Without an explicit start the robot begins on the first goal and heads for
    the rest; a loop then returns to the first goal.
    """
    goals = list(goals)
    if start is None:
        x, y, th = goals[0]
        start = Se2Pose(x, y, th or 0.0)
        todo = goals[1:]
        if loop:
            todo.append(goals[0])
    else:
        todo = goals + ([goals[0]] if loop else [])
    return start, todo

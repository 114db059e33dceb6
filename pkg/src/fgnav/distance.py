"""Occupancy grids, Euclidean distance fields and the obstacle potential.

Cell ``(row, col)`` of a grid covers ``[col, col+1) x [row, row+1)`` times the
resolution in the map frame, whose pose in the world is ``origin``. Distances
are stored at cell centers and interpolated bilinearly in between.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

from .core import Se2Pose

FREE = 0
OCCUPIED = 1
UNKNOWN = -1

DFLD_MAGIC = b"DFLD"
_DFLD_HEADER = struct.Struct("<4sIId3dd")


@dataclass
class GridMap:
    """Occupancy grid. ``cells`` has shape (height, width), row 0 at the origin."""

    cells: np.ndarray
    resolution: float
    origin: Se2Pose = Se2Pose()

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.cells.ndim != 2:
            raise ValueError("cells must be a 2D array")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def occupied(self, unknown_as_occupied: bool = False) -> np.ndarray:
        occ = self.cells == OCCUPIED
        if unknown_as_occupied:
            occ |= self.cells == UNKNOWN
        return occ

    def world_to_map(self, pts) -> np.ndarray:
        """World points (n, 2) to continuous map-frame cell coordinates (col, row)."""
        return _world_to_cells(pts, self.origin, self.resolution)

    def cell_center(self, row, col) -> np.ndarray:
        local = (np.stack([np.asarray(col, float), np.asarray(row, float)], axis=-1) + 0.5)
        return self.origin.transform_points(local * self.resolution)

    def cell_of(self, pts) -> np.ndarray:
        """Integer (row, col) of the cell containing each world point."""
        uv = np.floor(self.world_to_map(pts)).astype(int)
        return np.stack([uv[:, 1], uv[:, 0]], axis=1)

    def contains(self, pts) -> np.ndarray:
        rc = self.cell_of(pts)
        return (rc[:, 0] >= 0) & (rc[:, 0] < self.height) & (rc[:, 1] >= 0) & (rc[:, 1] < self.width)


def _world_to_cells(pts, origin: Se2Pose, resolution: float) -> np.ndarray:
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    c, s = math.cos(origin.theta), math.sin(origin.theta)
    dx = pts[:, 0] - origin.x
    dy = pts[:, 1] - origin.y
    out = np.empty_like(pts)
    out[:, 0] = (c * dx + s * dy) / resolution
    out[:, 1] = (-s * dx + c * dy) / resolution
    return out


def load_map(yaml_path: str) -> GridMap:
    """Read a map_server style map: YAML sidecar plus an 8-bit PGM image."""
    with open(yaml_path) as fh:
        meta = yaml.safe_load(fh)
    image_path = meta["image"]
    if not os.path.isabs(image_path):
        image_path = os.path.join(os.path.dirname(os.path.abspath(yaml_path)), image_path)
    img = np.asarray(Image.open(image_path).convert("L"), dtype=float)
    if meta.get("negate", 0):
        occ = img / 255.0
    else:
        occ = (255.0 - img) / 255.0
    cells = np.full(img.shape, UNKNOWN, dtype=np.int8)
    cells[occ >= float(meta.get("occupied_thresh", 0.65))] = OCCUPIED
    cells[occ <= float(meta.get("free_thresh", 0.196))] = FREE
    origin = meta.get("origin", [0.0, 0.0, 0.0])
    return GridMap(np.flipud(cells).copy(), float(meta["resolution"]), Se2Pose(*map(float, origin)))


def save_map(grid: GridMap, yaml_path: str, image_name: Optional[str] = None) -> None:
    """Write ``grid`` as PGM + YAML (occupied 0, free 254, unknown 205)."""
    image_name = image_name or os.path.splitext(os.path.basename(yaml_path))[0] + ".pgm"
    img = np.full(grid.cells.shape, 205, dtype=np.uint8)
    img[grid.cells == OCCUPIED] = 0
    img[grid.cells == FREE] = 254
    folder = os.path.dirname(os.path.abspath(yaml_path))
    Image.fromarray(np.flipud(img)).save(os.path.join(folder, image_name))
    meta = {
        "image": image_name,
        "resolution": float(grid.resolution),
        "origin": [float(grid.origin.x), float(grid.origin.y), float(grid.origin.theta)],
        "negate": 0,
        "occupied_thresh": 0.65,
        "free_thresh": 0.196,
    }
    with open(yaml_path, "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=False)


class DistanceField:
    """Nearest-obstacle distance sampled at cell centers, clamped at ``d_max``.

    Instances are read-only once built. ``source`` records what the field was
    built from ("static" or "overlay").
    """

    def __init__(self, values: np.ndarray, resolution: float, origin: Se2Pose,
                 d_max: float, source: str = "static"):
        values = np.array(values, dtype=float)
        values.flags.writeable = False
        self.values = values
        self.resolution = float(resolution)
        self.origin = origin
        self.d_max = float(d_max)
        self.source = source
        c, s = math.cos(origin.theta), math.sin(origin.theta)
        self._cs = (c, s)
        self._rot = np.array([[c, -s], [s, c]])
        # nested lists index much faster than numpy for single lookups
        self._rows = values.tolist()

    @property
    def shape(self):
        return self.values.shape

    def distance_at(self, p) -> np.ndarray | float:
        """Bilinear distance at world point(s); d_max outside the grid."""
        pts = np.asarray(p, dtype=float)
        scalar = pts.ndim == 1
        out = self._interp(_world_to_cells(pts, self.origin, self.resolution))
        return float(out[0]) if scalar else out

    def _interp(self, uv: np.ndarray) -> np.ndarray:
        h, w = self.values.shape
        u = uv[:, 0]
        v = uv[:, 1]
        inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        # continuous coordinates with cell centers on integers
        fu = np.clip(u - 0.5, 0.0, w - 1.0)
        fv = np.clip(v - 0.5, 0.0, h - 1.0)
        i0 = np.minimum(np.floor(fu).astype(int), max(w - 2, 0))
        j0 = np.minimum(np.floor(fv).astype(int), max(h - 2, 0))
        i1 = np.minimum(i0 + 1, w - 1)
        j1 = np.minimum(j0 + 1, h - 1)
        tu = fu - i0
        tv = fv - j0
        V = self.values
        d = (
            (1 - tu) * (1 - tv) * V[j0, i0]
            + tu * (1 - tv) * V[j0, i1]
            + (1 - tu) * tv * V[j1, i0]
            + tu * tv * V[j1, i1]
        )
        return np.where(inside, d, self.d_max)

    def _interp1(self, u: float, v: float) -> float:
        h, w = self.values.shape
        if not (0.0 <= u < w and 0.0 <= v < h):
            return self.d_max
        fu = min(max(u - 0.5, 0.0), w - 1.0)
        fv = min(max(v - 0.5, 0.0), h - 1.0)
        i0 = min(int(fu), max(w - 2, 0))
        j0 = min(int(fv), max(h - 2, 0))
        i1 = min(i0 + 1, w - 1)
        j1 = min(j0 + 1, h - 1)
        tu = fu - i0
        tv = fv - j0
        r0 = self._rows[j0]
        r1 = self._rows[j1]
        return ((1 - tv) * ((1 - tu) * r0[i0] + tu * r0[i1])
                + tv * ((1 - tu) * r1[i0] + tu * r1[i1]))

    def distance_and_gradient(self, x: float, y: float) -> Tuple[float, float, float]:
        """Scalar fast path of :meth:`distance_at` and :meth:`gradient`."""
        o = self.origin
        c, s = self._cs
        dx, dy = x - o.x, y - o.y
        u = (c * dx + s * dy) / self.resolution
        v = (-s * dx + c * dy) / self.resolution
        d = self._interp1(u, v)
        gu = (self._interp1(u + 0.5, v) - self._interp1(u - 0.5, v)) / self.resolution
        gv = (self._interp1(u, v + 0.5) - self._interp1(u, v - 0.5)) / self.resolution
        return d, c * gu - s * gv, s * gu + c * gv

    def gradient(self, p) -> np.ndarray:
        """Central differences of :meth:`distance_at` with step resolution/2.

        The stencil is laid along the map axes and the result rotated into the
        world frame.
        """
        pts = np.asarray(p, dtype=float)
        scalar = pts.ndim == 1
        uv = _world_to_cells(pts, self.origin, self.resolution)
        hc = 0.5  # half a cell
        du = np.array([hc, 0.0])
        dv = np.array([0.0, hc])
        gu = (self._interp(uv + du) - self._interp(uv - du)) / self.resolution
        gv = (self._interp(uv + dv) - self._interp(uv - dv)) / self.resolution
        g = np.stack([gu, gv], axis=1) @ self._rot.T
        return g[0] if scalar else g

    def with_points(self, points, margin: float = 1.0) -> "DistanceField":
        """Overlay obstacle points on this field: ``min(self, d_points)``.

        The point distances are computed in a window around the points grown
        by ``margin``; beyond it the field is left untouched, so the overlay is
        exact wherever some point is closer than ``margin``.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        h, w = self.values.shape
        values = np.array(self.values)
        if pts.size:
            uv = _world_to_cells(pts, self.origin, self.resolution)
            cols = np.floor(uv[:, 0]).astype(int)
            rows = np.floor(uv[:, 1]).astype(int)
            keep = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
            cols, rows = cols[keep], rows[keep]
            if cols.size:
                pad = int(math.ceil(margin / self.resolution)) + 1
                c0, c1 = max(cols.min() - pad, 0), min(cols.max() + pad + 1, w)
                r0, r1 = max(rows.min() - pad, 0), min(rows.max() + pad + 1, h)
                occ = np.zeros((r1 - r0, c1 - c0), dtype=bool)
                occ[rows - r0, cols - c0] = True
                local = ndimage.distance_transform_edt(~occ) * self.resolution
                np.minimum(values[r0:r1, c0:c1], local, out=values[r0:r1, c0:c1])
        return DistanceField(values, self.resolution, self.origin, self.d_max, "overlay")

    def save(self, path: str) -> None:
        """Binary dump: header then row-major little-endian float32 distances."""
        h, w = self.values.shape
        header = _DFLD_HEADER.pack(
            DFLD_MAGIC, w, h, self.resolution, self.origin.x, self.origin.y,
            self.origin.theta, self.d_max,
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.values.astype("<f4").tobytes(order="C"))

    @classmethod
    def load(cls, path: str) -> "DistanceField":
        with open(path, "rb") as fh:
            raw = fh.read()
        magic, w, h, res, ox, oy, oth, d_max = _DFLD_HEADER.unpack_from(raw, 0)
        if magic != DFLD_MAGIC:
            raise ValueError(f"{path}: not a distance field dump")
        data = np.frombuffer(raw, dtype="<f4", offset=_DFLD_HEADER.size, count=w * h)
        return cls(data.reshape(h, w).astype(float), res, Se2Pose(ox, oy, oth), d_max)


def build_distance_field(
    grid: GridMap, d_max: float, unknown_as_occupied: bool = False
) -> DistanceField:
    """Exact Euclidean distance from each cell center to the nearest occupied one."""
    occ = grid.occupied(unknown_as_occupied)
    if not occ.any():
        values = np.full(occ.shape, float(d_max))
    else:
        values = ndimage.distance_transform_edt(~occ) * grid.resolution
        np.minimum(values, d_max, out=values)
    return DistanceField(values, grid.resolution, grid.origin, d_max, "static")


@dataclass(frozen=True)
class PotentialParams:
    k: float = 0.075
    mu: float = 0.05
    rho: float = 0.8
    vortex_gain: float = 1.0

    def __post_init__(self):
        if not (0 < self.mu < self.rho):
            raise ValueError("need 0 < mu < rho")
        if self.k <= 0:
            raise ValueError("k must be positive")

    @property
    def cap(self) -> float:
        return self.k * (1.0 / self.mu - 1.0 / self.rho)


def potential_of_distance(d, params: PotentialParams):
    """Clamped repulsive potential as a function of obstacle distance."""
    d = np.asarray(d, dtype=float)
    mid = params.k * (1.0 / np.maximum(d, params.mu) - 1.0 / params.rho)
    out = np.where(d < params.mu, params.cap, np.where(d < params.rho, mid, 0.0))
    return float(out) if out.ndim == 0 else out


def potential_slope(d, params: PotentialParams):
    """dg/dd: ``-k/d^2`` inside the band, zero on the plateau and beyond rho."""
    d = np.asarray(d, dtype=float)
    band = (d >= params.mu) & (d < params.rho)
    out = np.where(band, -params.k / np.maximum(d, params.mu) ** 2, 0.0)
    return float(out) if out.ndim == 0 else out


def potential(df: DistanceField, params: PotentialParams, p):
    return potential_of_distance(df.distance_at(p), params)


def potential_gradient(df: DistanceField, params: PotentialParams, p) -> np.ndarray:
    return potential_slope(df.distance_at(p), params) * df.gradient(p)


def potential_gradient_with_vortex(
    df: DistanceField,
    params: PotentialParams,
    p,
    heading_hint,
    gain: Optional[float] = None,
) -> np.ndarray:
    """Repulsive gradient plus a tangent term along the equipotential.

    The tangent is ``gain * g(p) * rot90(grad d / |grad d|)`` with the rotation
    sense picked so it does not point against ``heading_hint``; exact ties
    rotate counterclockwise.
    """
    gain = params.vortex_gain if gain is None else gain
    p = np.asarray(p, dtype=float)
    d = df.distance_at(p)
    grad_d = df.gradient(p)
    g = potential_of_distance(d, params)
    out = potential_slope(d, params) * grad_d
    norm = math.hypot(grad_d[0], grad_d[1])
    if g == 0.0 or norm < 1e-12:
        return out
    t = np.array([-grad_d[1], grad_d[0]]) / norm
    if float(t @ np.asarray(heading_hint, dtype=float)) < 0.0:
        t = -t
    return out + gain * g * t

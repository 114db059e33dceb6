"""TOML configuration for the command-line tools.

Every section is optional and every key defaults to the library default.
Information matrices may be given as a diagonal (list of numbers) or in full
(list of rows). Unknown keys are rejected so typos do not pass silently.

Example ``mpc.toml``::

    [mpc]
    N = 20
    T_s = 0.1
    omega_x = [1.0, 1.0, 0.1]

    [potential]
    vortex_gain = 1.0

    [solver]
    rho_growth = 3.0
"""

from __future__ import annotations

import dataclasses
import sys
from typing import Any, Dict, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .constraints import ConstrainedSolverConfig
from .core import SolverConfig
from .distance import PotentialParams
from .localizer import DEFAULT_PRIOR_INFORMATION, LocalizerConfig
from .localizer import default_solver_config as loc_solver_default
from .mpc import MpcConfig
from .mpc import default_solver_config as mpc_solver_default
from .sim import LidarConfig, NavConfig, OdomNoise


class ConfigError(ValueError):
    pass


def load_toml(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _matrix(value) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.ndim == 1:
        return np.diag(a)
    if a.ndim == 2 and a.shape[0] == a.shape[1]:
        return a
    raise ConfigError(f"not an information matrix: {value!r}")


def _apply(obj, section: Dict[str, Any], name: str, matrices=()):
    known = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in section.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        changes[key] = _matrix(value) if key in matrices else value
    return dataclasses.replace(obj, **changes)


def _section(data: Dict[str, Any], name: str) -> Dict[str, Any]:
    sec = data.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def mpc_from_dict(data: Dict[str, Any]) -> MpcConfig:
    potential = _apply(PotentialParams(), _section(data, "potential"), "potential")
    sec = dict(_section(data, "mpc"))
    sec.setdefault("v_ref", None)     # so v_ref follows a changed v_max
    cfg = _apply(MpcConfig(), sec, "mpc", matrices=("omega_x", "omega_u", "omega_p"))
    return dataclasses.replace(cfg, potential=potential)


def mpc_solver_from_dict(data: Dict[str, Any]) -> ConstrainedSolverConfig:
    return _apply(mpc_solver_default(), _section(data, "solver"), "solver")


def planner_from_dict(data: Dict[str, Any]) -> Dict[str, float]:
    out = {"inflation_radius": 0.3, "d_max": 2.0}
    for key, value in _section(data, "planner").items():
        if key not in out:
            raise ConfigError(f"unknown key {key!r} in [planner]")
        out[key] = float(value)
    return out


def localizer_from_dict(data: Dict[str, Any]):
    """``(LocalizerConfig, SolverConfig, prior information, field d_max)``."""
    cfg = _apply(LocalizerConfig(), _section(data, "localizer"), "localizer")
    solver = _apply(loc_solver_default(), _section(data, "solver"), "solver")
    prior = _section(data, "prior")
    info = DEFAULT_PRIOR_INFORMATION.copy()
    for key, value in prior.items():
        if key != "information":
            raise ConfigError(f"unknown key {key!r} in [prior]")
        info = _matrix(value)
    fld = _section(data, "field")
    d_max = 2.0
    for key, value in fld.items():
        if key != "d_max":
            raise ConfigError(f"unknown key {key!r} in [field]")
        d_max = float(value)
    return cfg, solver, info, d_max


def nav_from_dict(data: Dict[str, Any]):
    """``(NavConfig, LidarConfig, OdomNoise)`` from a navigation config."""
    nav = _apply(NavConfig(), _section(data, "nav"), "nav")
    loc = _apply(LocalizerConfig(), _section(data, "localizer"), "localizer")
    nav = dataclasses.replace(nav, mpc=mpc_from_dict(data), solver=mpc_solver_from_dict(data),
                              localizer=loc)
    lidar = _apply(LidarConfig(), _section(data, "lidar"), "lidar")
    odom = _apply(OdomNoise(), _section(data, "odometry"), "odometry")
    return nav, lidar, odom


def solver_config_to_dict(cfg) -> Dict[str, Any]:
    """Plain dict of a solver config, for echoing into reports."""
    if isinstance(cfg, (SolverConfig, ConstrainedSolverConfig)):
        return dataclasses.asdict(cfg)
    raise TypeError(type(cfg))

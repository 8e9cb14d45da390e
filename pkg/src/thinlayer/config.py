"""TOML run configuration: parsing, defaults and aggregated validation.

    [geometry]  inclusion, size, center, section, n, m, m_c
    [scales]    alpha, eps (list), sigma (list of [a, b] per horizontal axis)
    [physics]   D, case, T, dt, lateral, recipe, [physics.recipe_params]
    [solver]    cell_tol, micro_tol, max_iter, advection, time_scheme, workers
    [output]    dir, field_format, snapshot_times

Rationals may be written as strings ("1/16") or numbers.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .convergence import DataRecipe, ZERO_RECIPE
from .errors import ConfigParseError, ConfigValidationError, ThinLayerError
from .geometry import InclusionSpec, as_fraction, build_unit_cell, check_admissible_scales


@dataclass
class GeometryConfig:
    inclusion: str = "ball"
    size: object = 0.25
    center: Optional[list] = None
    section: str = "ball"
    n: int = 2
    m: int = 64
    m_c: int = 16


@dataclass
class ScalesConfig:
    alpha: object = "1/2"
    eps: list = field(default_factory=lambda: ["1/4", "1/16", "1/64"])
    sigma: Optional[list] = None


@dataclass
class PhysicsConfig:
    D: float = 1.0
    case: str = "D1"
    T: float = 1.0
    dt: float = 0.05
    lateral: Optional[str] = None
    recipe: str = "generic"
    recipe_params: dict = field(default_factory=dict)


@dataclass
class SolverConfig:
    cell_tol: float = 1e-10
    micro_tol: float = 1e-8
    max_iter: int = 5000
    advection: str = "upwind"
    time_scheme: str = "euler"
    workers: int = 1


@dataclass
class OutputConfig:
    dir: str = "out"
    field_format: str = "csv"
    snapshot_times: list = field(default_factory=list)


SECTIONS = {"geometry": GeometryConfig, "scales": ScalesConfig, "physics": PhysicsConfig,
            "solver": SolverConfig, "output": OutputConfig}


@dataclass
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    scales: ScalesConfig = field(default_factory=ScalesConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def inclusion(self) -> InclusionSpec:
        g = self.geometry
        center = tuple(g.center) if g.center is not None else None
        size = tuple(g.size) if isinstance(g.size, list) else g.size
        return InclusionSpec(g.inclusion, center=center, size=size, section=g.section)

    @property
    def alpha(self) -> Fraction:
        return as_fraction(self.scales.alpha)

    @property
    def eps(self) -> list:
        return [as_fraction(e) for e in self.scales.eps]

    @property
    def sigma(self):
        s = self.scales.sigma
        return None if s is None else tuple((int(a), int(b)) for a, b in s)

    @property
    def lateral(self) -> str:
        lat = self.physics.lateral
        return lat if lat is not None else ("periodic" if self.physics.case == "D2" else "neumann")

    @property
    def recipe(self) -> DataRecipe:
        if self.physics.recipe == "zero":
            return ZERO_RECIPE
        return DataRecipe(**self.physics.recipe_params)

    def resolved(self) -> dict:
        """Plain dict with defaults filled and rationals normalised (JSON safe)."""
        d = asdict(self)
        d["scales"]["alpha"] = str(self.alpha)
        d["scales"]["eps"] = [str(e) for e in self.eps]
        d["physics"]["lateral"] = self.lateral
        return d

    def checksum(self, *keys) -> str:
        """sha256 of the resolved sections ``keys`` (all sections if none given)."""
        d = self.resolved()
        d.pop("output")
        if keys:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _build(raw: dict) -> tuple[RunConfig, list]:
    problems = []
    parts = {}
    for key, value in raw.items():
        if key not in SECTIONS:
            problems.append(f"unknown section [{key}]")
    for name, cls in SECTIONS.items():
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            problems.append(f"[{name}] must be a table")
            sec = {}
        known = {f.name for f in fields(cls)}
        for k in sec:
            if k not in known:
                problems.append(f"unknown key {name}.{k}")
        parts[name] = cls(**{k: v for k, v in sec.items() if k in known})
    return RunConfig(**parts), problems


def validate(cfg: RunConfig) -> list:
    """All violations of the cross-field constraints, as messages."""
    v = []
    g, s, ph, so, out = cfg.geometry, cfg.scales, cfg.physics, cfg.solver, cfg.output
    if not isinstance(g.n, int) or g.n < 2:
        v.append(f"geometry.n = {g.n!r} must be an integer >= 2")
    if ph.case not in ("D1", "D2"):
        v.append(f"physics.case = {ph.case!r} must be D1 or D2")
    elif g.n > 4:
        v.append(f"geometry.n = {g.n} exceeds 4, transport is restricted to n <= 4")
    for k in ("m", "m_c"):
        val = getattr(g, k)
        if not isinstance(val, int) or val < 4:
            v.append(f"geometry.{k} = {val!r} must be an integer >= 4")
    try:
        cfg.inclusion.validate(g.n) if isinstance(g.n, int) else None
    except (ThinLayerError, TypeError, ValueError) as exc:
        v.append(f"geometry: {exc}")

    alpha = None
    try:
        alpha = as_fraction(s.alpha)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        v.append(f"scales.alpha: {exc}")
    eps = []
    for e in s.eps:
        try:
            eps.append(as_fraction(e))
        except (TypeError, ValueError, ZeroDivisionError) as exc:
            v.append(f"scales.eps entry {e!r}: {exc}")
    if alpha is not None:
        for e in eps:
            try:
                check_admissible_scales(e, alpha)
            except ThinLayerError as exc:
                v.append(f"scales: eps = {e}, alpha = {alpha} not admissible: {exc}")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        v.append("scales.eps must be strictly decreasing")
    if s.sigma is not None:
        ok = isinstance(g.n, int) and len(s.sigma) == g.n - 1
        try:
            ok = ok and all(int(a) == a and int(b) == b and b > a for a, b in s.sigma)
        except (TypeError, ValueError):
            ok = False
        if not ok:
            v.append("scales.sigma needs n-1 pairs [a, b] of integers with a < b")

    if not ph.D > 0:
        v.append(f"physics.D = {ph.D} must be positive")
    if not ph.dt > 0 or not ph.T > 0:
        v.append("physics.T and physics.dt must be positive")
    if ph.lateral not in (None, "neumann", "periodic"):
        v.append(f"physics.lateral = {ph.lateral!r} must be neumann or periodic")
    if ph.case == "D2" and ph.lateral == "neumann":
        v.append("case D2 requires Sigma-periodic lateral conditions (physics.lateral = periodic)")
    if ph.recipe not in ("generic", "zero"):
        v.append(f"physics.recipe = {ph.recipe!r} must be generic or zero")
    else:
        try:
            cfg.recipe
        except TypeError as exc:
            v.append(f"physics.recipe_params: {exc}")

    if so.advection not in ("upwind", "central"):
        v.append(f"solver.advection = {so.advection!r} must be upwind or central")
    if so.time_scheme not in ("euler", "cn"):
        v.append(f"solver.time_scheme = {so.time_scheme!r} must be euler or cn")
    if not (so.cell_tol > 0 and so.micro_tol > 0):
        v.append("solver tolerances must be positive")
    if not isinstance(so.workers, int) or so.workers < 1:
        v.append("solver.workers must be a positive integer")
    if out.field_format not in ("csv", "raw"):
        v.append(f"output.field_format = {out.field_format!r} must be csv or raw")
    if any(not 0 <= t <= ph.T for t in out.snapshot_times):
        v.append("output.snapshot_times must lie in [0, T]")
    return v


def config_from_dict(raw: dict) -> RunConfig:
    cfg, problems = _build(raw)
    problems += validate(cfg)
    if problems:
        raise ConfigValidationError(problems)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigParseError(f"{path}: no such file") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigParseError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def unit_cell(cfg: RunConfig, m: Optional[int] = None):
    return build_unit_cell(cfg.inclusion, cfg.geometry.n, m or cfg.geometry.m)

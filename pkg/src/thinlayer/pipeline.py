"""Stage orchestration with checksum-keyed caching and a run manifest.

Stages and their upstream dependencies:

    cell       -> permeability K                    cell/permeability.json
    effective  -> effective diffusion D*            effective/effective_diffusion.json
    darcy      (cell)  limit Darcy problem          darcy/darcy.json + fields
    transport  (darcy, effective) macro transport   transport/transport.json + fields
    micro      micro Stokes + transport per eps     micro/eps_<N>.json + fields
    converge   eps-sweep report                     converge/convergence.json, .csv
    report     summary of whatever is in out_dir    report/summary.json

Each stage output lives in ``cache_dir/<stage>/<key>`` where the key hashes
the config sections the stage reads, the upstream keys and the package
version; a rerun with an unchanged config copies the cached files.  JSON
reports carry no timings, so identical inputs give identical bytes; the
timings go to the manifest only.
"""
from __future__ import annotations

import hashlib
import json
import os
import platform
import re
import shutil
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .cell_diffusion import DiffusionCase, cell_effective_diffusion
from .cell_stokes import cell_permeability
from .config import RunConfig, unit_cell
from .convergence import SweepPlan, scaling_study
from .discrete import weighted_norms
from .errors import ThinLayerError
from .geometry import build_layer
from .macro_darcy import DarcyProblem, MacroGrid, grid_for_layer, solve_darcy, verify_darcy
from .macro_transport import MacroTransportProblem, solve_macro_transport
from .micro import (MicroStokesProblem, MicroTransportProblem, solve_micro_stokes,
                    solve_micro_transport)

STAGES = ("cell", "effective", "darcy", "transport", "micro", "converge", "report")
DEPENDS = {"cell": (), "effective": (), "darcy": ("cell",), "transport": ("darcy", "effective"),
           "micro": (), "converge": (), "report": ()}
# config sections each stage reads (output block excluded except field format)
READS = {"cell": ("geometry", "solver"), "effective": ("geometry", "physics", "solver"),
         "darcy": ("geometry", "scales", "physics", "solver"),
         "transport": ("geometry", "scales", "physics", "solver", "output"),
         "micro": ("geometry", "scales", "physics", "solver", "output"),
         "converge": ("geometry", "scales", "physics", "solver"),
         "report": ("geometry", "scales", "physics", "solver")}


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# field dumps


def write_field(stem, values, axes, fmt="csv", name="value", meta=None) -> list:
    """Dump a tensor-grid field; returns the written paths.

    csv: one row per grid point, coordinates then value (C order).
    raw: little-endian float64 ``stem.bin`` plus ``stem.json`` sidecar with
    shape, order and the 1-D axes.
    """
    stem = Path(stem)
    values = np.ascontiguousarray(values, dtype="<f8")
    axes = [np.asarray(a, dtype=float) for a in axes]
    if tuple(a.size for a in axes) != values.shape:
        raise ValueError("axes do not match the field shape")
    if fmt == "csv":
        path = stem.with_suffix(".csv")
        pts = np.meshgrid(*axes, indexing="ij")
        table = np.column_stack([p.ravel() for p in pts] + [values.ravel()])
        header = ",".join([f"x{i + 1}" for i in range(len(axes))] + [name])
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")
        return [path]
    if fmt == "raw":
        path = stem.with_suffix(".bin")
        values.tofile(path)
        side = stem.with_suffix(".json")
        side.write_text(dumps({"name": name, "shape": list(values.shape), "dtype": "<f8",
                               "order": "C", "axes": [a.tolist() for a in axes],
                               "meta": meta or {}}))
        return [path, side]
    raise ValueError(f"unknown field format {fmt!r}")


def read_field(stem):
    """Inverse of ``write_field`` for the raw format: (values, axes, meta)."""
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    vals = np.fromfile(stem.with_suffix(".bin"), dtype=side["dtype"]).reshape(side["shape"])
    return vals, [np.asarray(a) for a in side["axes"]], side["meta"]


# stages


@dataclass
class StageContext:
    cfg: RunConfig
    out_dir: Path
    workers: int

    def load(self, stage, name):
        return json.loads((self.out_dir / stage / name).read_text())


def _eps_tag(e) -> str:
    return f"eps_{e.denominator}"     # admissible eps are 1/N


def _macro_grid(cfg: RunConfig):
    cell = unit_cell(cfg, cfg.geometry.m_c)
    layer = build_layer(cell, cfg.eps[-1], cfg.alpha, cfg.sigma)
    return grid_for_layer(layer)


def stage_cell(ctx: StageContext, d: Path) -> dict:
    cfg = ctx.cfg
    cell = unit_cell(cfg)
    K, sols = cell_permeability(cell, cfg.solver.cell_tol, ctx.workers)
    info = K.as_dict()
    info["iterations"] = [s.iterations for s in sols]
    info["eigenvalues"] = K.eigenvalues.tolist()
    (d / "permeability.json").write_text(dumps(info))
    return {"checks": {"K_positive_definite": bool(min(info["eigenvalues"]) > 0)}}


def stage_effective(ctx: StageContext, d: Path) -> dict:
    cfg = ctx.cfg
    cell = unit_cell(cfg)
    case = DiffusionCase(cfg.physics.case, cfg.physics.D)
    Dstar, _ = cell_effective_diffusion(cell, case, cfg.solver.cell_tol)
    (d / "effective_diffusion.json").write_text(dumps(Dstar.as_dict()))
    return {}


def stage_darcy(ctx: StageContext, d: Path) -> dict:
    cfg = ctx.cfg
    K = np.asarray(ctx.load("cell", "permeability.json")["K"])
    grid = _macro_grid(cfg)
    rec = cfg.recipe
    sol = solve_darcy(DarcyProblem(K, rec.f0, rec.p0b(1), rec.p0b(-1), grid))
    diag = verify_darcy(sol)
    info = {"grid": {"xbar": [a.tolist() for a in grid.xbar], "nz": grid.nz},
            "un_column": np.asarray(sol.un_column).tolist(), "diagnostics": diag.as_dict(),
            "p0_range": [float(sol.p0.min()), float(sol.p0.max())]}
    (d / "darcy.json").write_text(dumps(info))
    fmt = cfg.output.field_format
    write_field(d / "p0", sol.p0, grid.axes, fmt, "p0")
    for i in range(grid.n):
        write_field(d / f"ubar{i + 1}", sol.ubar[i], grid.axes, fmt, f"ubar{i + 1}")
    return {"checks": {"darcy_column_constant": diag.ok}}


def stage_transport(ctx: StageContext, d: Path) -> dict:
    cfg = ctx.cfg
    dj = ctx.load("darcy", "darcy.json")
    ej = ctx.load("effective", "effective_diffusion.json")
    grid = MacroGrid(tuple(np.asarray(a) for a in dj["grid"]["xbar"]), dj["grid"]["nz"])
    porosity = ej["porosity"]
    rec = cfg.recipe
    ph, so = cfg.physics, cfg.solver
    sol = solve_macro_transport(MacroTransportProblem(
        ph.case, np.asarray(ej["Dstar"]), np.asarray(dj["un_column"]), grid, ph.T, ph.dt,
        porosity=porosity, gbar0=rec.gbar0(porosity), c0b_top=rec.c0b(1),
        c0b_bottom=rec.c0b(-1), snapshot_times=cfg.output.snapshot_times,
        advection=so.advection, time_scheme=so.time_scheme))
    info = {"times": [float(t) for t in sol.times], "max_ledger_residual": sol.max_ledger_residual,
            "final_range": [float(sol.final.min()), float(sol.final.max())]}
    (d / "transport.json").write_text(dumps(info))
    fmt = cfg.output.field_format
    write_field(d / "c0_final", sol.final, grid.axes, fmt, "c0")
    for k, (t, c) in enumerate(zip(sol.times, sol.snapshots)):
        write_field(d / f"c0_snapshot_{k:03d}", c, grid.axes, fmt, "c0", {"t": float(t)})
    return {}


def _micro_one(cfg: RunConfig, cell, e, d: Path):
    layer = build_layer(cell, e, cfg.alpha, cfg.sigma)
    f, pb, g, cb = cfg.recipe.micro(layer)
    ms = solve_micro_stokes(MicroStokesProblem(layer, f, pb), tol=cfg.solver.micro_tol,
                            max_iter=cfg.solver.max_iter)
    ph = cfg.physics
    mt = solve_micro_transport(MicroTransportProblem(
        layer, DiffusionCase(ph.case, ph.D), ms, g=g, cb=cb, T=ph.T, dt=ph.dt,
        snapshot_times=cfg.output.snapshot_times, advection=cfg.solver.advection,
        lateral=cfg.lateral))
    un, pn, cn = (weighted_norms(x, layer) for x in (ms.velocity, ms.pressure, mt.final_field))
    tag = _eps_tag(layer.eps)
    info = {"eps": str(layer.eps), "eps_alpha": str(layer.eps_alpha),
            "shape": list(layer.grid().shape),
            "stokes": {"iterations": ms.iterations,
                       "divergence_residual": ms.divergence_residual,
                       "momentum_residual": ms.momentum_residual},
            "norms": {"u_l2": un.l2, "u_grad": un.grad, "p_l2": pn.l2,
                      "c_l2": cn.l2, "c_linf": cn.linf},
            "transport_ledger": mt.max_ledger_residual}
    (d / f"{tag}.json").write_text(dumps(info))
    fmt = cfg.output.field_format
    g_cells = layer.grid()
    axes = [g_cells.cell_centers(a) for a in range(layer.n)]
    write_field(d / f"{tag}_pressure", np.where(layer.fluid_mask, ms.pressure.values, 0.0),
                axes, fmt, "p")
    write_field(d / f"{tag}_concentration", mt.final, axes, fmt, "c")
    comps = ms.system.unstack(ms.u)
    for k, c in enumerate(comps):
        X = ms.system.grid.face_coordinates(k)
        fax = [np.unique(X[a]) for a in range(layer.n)]
        write_field(d / f"{tag}_u{k + 1}", c, fax, fmt, f"u{k + 1}")


def stage_micro(ctx: StageContext, d: Path) -> dict:
    cfg = ctx.cfg
    cell = unit_cell(cfg, cfg.geometry.m_c)
    if ctx.workers > 1:
        with ThreadPoolExecutor(ctx.workers) as pool:
            list(pool.map(lambda e: _micro_one(cfg, cell, e, d), cfg.eps))
    else:
        for e in cfg.eps:
            _micro_one(cfg, cell, e, d)
    return {}


def sweep_plan(cfg: RunConfig, workers: int = 1) -> SweepPlan:
    ph = cfg.physics
    return SweepPlan(cfg.eps, cfg.alpha, cfg.geometry.n, cfg.geometry.m_c, cfg.inclusion,
                     ph.case, ph.D, cfg.recipe, ph.T, ph.dt, cfg.solver.micro_tol,
                     lateral=cfg.lateral, advection=cfg.solver.advection, sigma=cfg.sigma,
                     workers=workers)


def stage_converge(ctx: StageContext, d: Path) -> dict:
    report = scaling_study(sweep_plan(ctx.cfg, ctx.workers))
    (d / "convergence.json").write_text(report.to_json() + "\n")
    report.write_csv(d / "convergence.csv")
    return {"checks": {f"converge_{k}": v for k, v in report.checks.items()}}


def stage_report(ctx: StageContext, d: Path) -> dict:
    out = ctx.out_dir
    summary = {"config": ctx.cfg.resolved()}
    summary["config"].pop("output")
    sources = {"permeability": "cell/permeability.json",
               "effective_diffusion": "effective/effective_diffusion.json",
               "darcy": "darcy/darcy.json", "transport": "transport/transport.json",
               "convergence": "converge/convergence.json"}
    for key, rel in sources.items():
        p = out / rel
        if p.exists():
            j = json.loads(p.read_text())
            if key == "darcy":
                j = {"diagnostics": j["diagnostics"], "p0_range": j["p0_range"]}
            summary[key] = j
    micro = [p for p in (out / "micro").glob("eps_*.json") if re.fullmatch(r"eps_\d+", p.stem)] \
        if (out / "micro").exists() else []
    micro.sort(key=lambda p: int(p.stem[4:]))
    if micro:
        summary["micro"] = [json.loads(p.read_text()) for p in micro]
    (d / "summary.json").write_text(dumps(summary))
    return {}


RUNNERS = {"cell": stage_cell, "effective": stage_effective, "darcy": stage_darcy,
           "transport": stage_transport, "micro": stage_micro, "converge": stage_converge,
           "report": stage_report}


# orchestration


@dataclass
class RunManifest:
    config: dict
    versions: dict
    stages: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return [s for s, r in self.stages.items() if r["status"] == "failed"]

    @property
    def failed_checks(self) -> list:
        return sorted(f"{s}:{c}" for s, r in self.stages.items()
                      for c, ok in r.get("checks", {}).items() if not ok)

    def as_dict(self) -> dict:
        return {"config": self.config, "versions": self.versions, "stages": self.stages,
                "files": self.files, "timings": self.timings}

    def to_json(self) -> str:
        return dumps(self.as_dict())


def resolve_stages(selection) -> list:
    """Requested stages plus their upstream dependencies, in pipeline order."""
    sel = set(STAGES if selection in (None, "all") or "all" in selection else selection)
    unknown = sel - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages: {sorted(unknown)}")
    todo = list(sel)
    while todo:
        s = todo.pop()
        for dep in DEPENDS[s]:
            if dep not in sel:
                sel.add(dep)
                todo.append(dep)
    return [s for s in STAGES if s in sel]


def _stage_key(cfg: RunConfig, stage: str, upstream: dict) -> str:
    resolved = cfg.resolved()
    payload = {"stage": stage, "version": __version__,
               "config": {k: resolved[k] for k in READS[stage]},
               "upstream": {u: upstream[u] for u in DEPENDS[stage]}}
    if stage == "report":
        payload["upstream"] = dict(sorted(upstream.items()))
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def default_cache_dir(out_dir) -> Path:
    env = os.environ.get("THINLAYER_CACHE_DIR")
    return Path(env) if env else Path(out_dir) / ".cache"


def run_pipeline(cfg: RunConfig, stages=None, out_dir=None, cache_dir=None,
                 workers=None, use_cache: bool = True) -> RunManifest:
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(cache_dir) if cache_dir else default_cache_dir(out)
    workers = workers or int(os.environ.get("THINLAYER_THREADS", 0)) or cfg.solver.workers
    ctx = StageContext(cfg, out, workers)
    man = RunManifest(cfg.resolved(), {"thinlayer": __version__, "numpy": np.__version__,
                                       "scipy": scipy.__version__,
                                       "python": platform.python_version()})
    keys = {}
    for stage in resolve_stages(stages):
        rec = {"status": "ok", "cache_hit": False}
        bad = [u for u in DEPENDS[stage] if man.stages.get(u, {}).get("status") != "ok"]
        if bad:
            man.stages[stage] = {"status": "skipped", "reason": f"upstream failed: {bad}"}
            continue
        key = _stage_key(cfg, stage, keys)
        rec["key"] = key
        cdir = cache / stage / key
        done = cdir / "_stage.json"
        t0 = time.perf_counter()
        # the report reads whatever is in out_dir, so it is always rebuilt
        if use_cache and stage != "report" and done.exists():
            rec["cache_hit"] = True
            rec.update({k: v for k, v in json.loads(done.read_text()).items() if k == "checks"})
        else:
            tmp = cache / stage / f".{key}.tmp"
            shutil.rmtree(tmp, ignore_errors=True)
            tmp.mkdir(parents=True)
            try:
                extra = RUNNERS[stage](ctx, tmp) or {}
            except (ThinLayerError, ValueError, ArithmeticError) as exc:
                shutil.rmtree(tmp, ignore_errors=True)
                man.stages[stage] = {"status": "failed", "key": key,
                                     "error": f"{type(exc).__name__}: {exc}",
                                     "traceback": traceback.format_exc(limit=3)}
                man.timings[stage] = time.perf_counter() - t0
                continue
            rec.update(extra)
            (tmp / "_stage.json").write_text(dumps(extra))
            shutil.rmtree(cdir, ignore_errors=True)
            tmp.rename(cdir)
        dest = out / stage
        shutil.rmtree(dest, ignore_errors=True)
        dest.mkdir(parents=True)
        files = []
        for p in sorted(cdir.iterdir()):
            if p.name == "_stage.json":
                continue
            shutil.copy2(p, dest / p.name)
            files.append(f"{stage}/{p.name}")
        rec["files"] = files
        man.stages[stage] = rec
        man.timings[stage] = time.perf_counter() - t0
        keys[stage] = key

    for s, r in sorted(man.stages.items()):
        for rel in r.get("files", []):
            p = out / rel
            man.files.append({"path": rel, "sha256": sha256_file(p), "bytes": p.stat().st_size})
    man.files.sort(key=lambda f: f["path"])
    (out / "manifest.json").write_text(man.to_json())
    return man

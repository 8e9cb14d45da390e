"""Acceptance criteria, each at its stated tolerance and budget.

A summary line per criterion is printed at the end of the pytest run.
"""
import shutil
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from thinlayer.cell_diffusion import (DiffusionCase, cell_effective_diffusion,
                                      solve_vertical_cell_1d)
from thinlayer.cell_stokes import cell_permeability
from thinlayer.config import load_config
from thinlayer.convergence import SweepPlan, scaling_study
from thinlayer.errors import EmptyInclusionError
from thinlayer.geometry import InclusionSpec, area_profile, build_layer, build_unit_cell
from thinlayer.macro_darcy import DarcyProblem, MacroGrid, solve_darcy, verify_darcy
from thinlayer.macro_transport import (MacroTransportProblem, solve_macro_transport,
                                       steady_profile)
from thinlayer.micro import (MicroStokesProblem, MicroTransportProblem, solve_micro_stokes,
                             solve_micro_transport)
from thinlayer.pipeline import run_pipeline

PRESET = Path(__file__).resolve().parents[1] / "presets" / "tiny.toml"
SWEEP_EPS = [Fraction(1, 4), Fraction(1, 16), Fraction(1, 64)]


def test_permeability_dual_formula(criterion):
    t0 = time.perf_counter()
    K, _ = cell_permeability(build_unit_cell(InclusionSpec("ball", size=0.25), 2, 128))
    dt = time.perf_counter() - t0
    sym = np.abs(K.K - K.K.T).max() / np.abs(K.K).max()
    ok = (K.formula_discrepancy <= 1e-5 and sym <= 1e-8 and K.eigenvalues.min() > 0
          and dt <= 30)
    criterion(1, ok, f"disk m=128: |Ke-Kf|/|K| = {K.formula_discrepancy:.1e}, "
                     f"asym {sym:.1e}, min eig {K.eigenvalues.min():.4g}, {dt:.1f}s")
    assert ok


def test_cylinder_block_structure(criterion):
    t0 = time.perf_counter()
    K, _ = cell_permeability(build_unit_cell(InclusionSpec("cylinder", size=0.25), 3, 32))
    dt = time.perf_counter() - t0
    Kin = max(abs(K.K[0, 2]), abs(K.K[1, 2]), abs(K.K[2, 0]), abs(K.K[2, 1]))
    ok = Kin <= 1e-6 * K.K[2, 2] and dt <= 120
    criterion(2, ok, f"n=3 cylinder m=32: max|K_in| = {Kin:.1e} vs K_nn = {K.K[2, 2]:.4g}, "
                     f"{dt:.1f}s")
    assert ok


def test_vertical_diffusion_closed_form(criterion):
    D = 1.7
    two = solve_vertical_cell_1d(np.r_[np.ones(32), np.full(32, 0.5)], D)
    e_two = abs(D * two.c - 2 * D / 3)
    cell = build_unit_cell(InclusionSpec("ball", size=0.25), 2, 64)
    Ds, _ = cell_effective_diffusion(cell, DiffusionCase("D2", D))
    A = area_profile(cell)
    # quadrature of (int A^-1)^-1 for the piecewise-constant raster profile
    vals = np.asarray(A.values, dtype=float)
    inv = quad(lambda y: 1.0 / vals[min(int(y * vals.size), vals.size - 1)], 0, 1,
               points=list(np.arange(1, vals.size) / vals.size), limit=4 * vals.size)[0]
    e_ball = abs(Ds.D_nn - D / inv)
    ok = e_two <= 1e-10 and e_ball <= 1e-10
    criterion(3, ok, f"two-slab |D*_nn - 2D/3| = {e_two:.1e}, ball vs quadrature {e_ball:.1e}")
    assert ok


def test_full_fluid_degenerate(criterion):
    full = build_unit_cell(InclusionSpec("none"), 2, 16)
    exact = all(np.array_equal(cell_effective_diffusion(full, DiffusionCase(k, 1.3))[0].Dstar,
                               1.3 * np.eye(2)) for k in ("D1", "D2"))
    try:
        cell_permeability(full)
        raised = False
    except EmptyInclusionError:
        raised = True
    criterion(4, exact and raised, f"D* = D I exactly: {exact}; EmptyInclusion raised: {raised}")
    assert exact and raised


def test_darcy_exactness(criterion):
    K = np.array([[0.02, 0.003], [0.003, 0.015]])
    grid = MacroGrid(((np.arange(16) + 0.5) / 16,), 32)
    Pt, Pb = 0.4, -0.9
    sol = solve_darcy(DarcyProblem(K, (0.0, 0.0), Pt, Pb, grid))
    ep = np.abs(sol.p0 - (0.5 * (Pt + Pb) + 0.5 * (Pt - Pb) * grid.z)).max()
    eu = np.abs(sol.ubar[-1] + K[1, 1] * (Pt - Pb) / 2).max()
    var = verify_darcy(sol).ubar_variation
    ok = max(ep, eu, var) <= 1e-10
    criterion(5, ok, f"linear p0 err {ep:.1e}, u^n err {eu:.1e}, column variation {var:.1e}")
    assert ok


def test_micro_equilibrium(criterion):
    cell = build_unit_cell(InclusionSpec("ball", size=0.25), 2, 16)
    worst, slowest = 0.0, 0.0
    for e in SWEEP_EPS:
        layer = build_layer(cell, e, Fraction(1, 2))
        t0 = time.perf_counter()
        sol = solve_micro_stokes(MicroStokesProblem(layer, lambda x, z: (0 * x, 0 * x),
                                                    lambda x, z: 0 * x + 1.5))
        slowest = max(slowest, time.perf_counter() - t0)
        worst = max(worst, np.abs(sol.u).max() / 1.5, np.abs(sol.p - 1.5).max() / 1.5)
    ok = worst <= 1e-8 and slowest <= 60
    criterion(6, ok, f"u = 0, p = p^b to {worst:.1e} (tol 1e-8), slowest eps {slowest:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def sweep():
    t0 = time.perf_counter()
    rep = scaling_study(SweepPlan(SWEEP_EPS))
    return rep, time.perf_counter() - t0


def test_scaling_slopes(criterion, sweep):
    rep, dt = sweep
    s = rep.slopes
    ok = all(rep.checks[f"slope_{q}"] for q in ("u_l2", "u_grad", "p_l2")) and dt <= 600
    criterion(7, ok, ", ".join(f"{q} {s[q]['slope']:.3f} (R2 {s[q]['r2']:.4f}, need "
                               f"{rep.expected[q] - 0.3:.2f})" for q in ("u_l2", "u_grad", "p_l2"))
              + f", {dt:.0f}s")
    assert ok


def test_two_scale_errors(criterion, sweep):
    rep, _ = sweep
    err = {q: [r.errors[q] for r in rep.records] for q in ("velocity", "pressure", "concentration")}
    dec = all(all(b < a for a, b in zip(v, v[1:])) for v in err.values())
    fin = err["pressure"][-1] <= 0.25 and err["concentration"][-1] <= 0.25
    ok = dec and fin
    criterion(8, ok, "; ".join(f"{q} " + " > ".join(f"{x:.3f}" for x in v)
                               for q, v in err.items()))
    assert ok


def test_transport_properties(criterion):
    grid = MacroGrid(((np.arange(4) + 0.5) / 4,), 32)
    zero = solve_macro_transport(MacroTransportProblem("D1", np.eye(2), 0.7, grid, 1.0, 0.05,
                                                       snapshot_times=np.arange(21) * 0.05))
    cell = build_unit_cell(InclusionSpec("ball", size=0.25), 2, 16)
    layer = build_layer(cell, Fraction(1, 16), Fraction(1, 2))
    flow = solve_micro_stokes(MicroStokesProblem(
        layer, lambda x, z: (0.25 * np.sin(2 * np.pi * x), 1 + z / 2),
        lambda x, z: -0.5 * z))
    zero_micro = solve_micro_transport(MicroTransportProblem(layer, DiffusionCase("D1"), flow))
    exact_zero = all(np.all(s == 0) for s in zero.snapshots) and np.all(zero_micro.final == 0)

    # maximum principle at every step, boundary data in [0, 1]
    steps = np.arange(1, 21) * 0.05
    macro = solve_macro_transport(MacroTransportProblem(
        "D1", np.diag([1.0, 0.6]), np.linspace(-2, 2, 4), grid, 1.0, 0.05, porosity=0.8,
        c0b_top=lambda t, x: np.minimum(1.0, 4 * t), c0b_bottom=lambda t, x: 0.5 + 0 * x,
        snapshot_times=steps))
    micro = solve_micro_transport(MicroTransportProblem(
        layer, DiffusionCase("D1"), flow, cb=lambda t, x, z: np.minimum(1.0, 4 * t) * (1 + z) / 2,
        T=1.0, dt=0.05, snapshot_times=steps))
    lo = min(min(s.min() for s in macro.snapshots), min(s.min() for s in micro.snapshots))
    hi = max(max(s.max() for s in macro.snapshots), max(s.max() for s in micro.snapshots))
    viol = max(0.0, -lo, hi - 1.0)

    g1 = MacroGrid((np.array([0.5]),), 256)
    st = solve_macro_transport(MacroTransportProblem("D1", np.eye(2), 1.0, g1, 60.0, 0.5,
                                                     c0b_top=1.0))
    l2 = float(np.sqrt(np.sum((st.final[0] - steady_profile(g1.z, 1.0, 1.0)) ** 2) * g1.dz))
    ok = exact_zero and viol <= 1e-12 and l2 <= 1e-3
    criterion(9, ok, f"zero data exact: {exact_zero}; hull violation {viol:.1e}; "
                     f"steady L2 err {l2:.1e} (256 cells, upwind, v/D*_nn = 1)")
    assert ok


def test_determinism(criterion, tmp_path):
    cfg = load_config(PRESET)
    reports = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        run_pipeline(cfg, "all", out_dir=out, cache_dir=tmp_path / f"cache{k}")
        reports.append({p.relative_to(out).as_posix(): p.read_bytes()
                        for p in sorted(out.rglob("*.json")) if p.name != "manifest.json"})
    same = reports[0] == reports[1] and len(reports[0]) > 0
    diff = sorted(k for k in reports[0] if reports[0][k] != reports[1].get(k))
    criterion(10, same, f"{len(reports[0])} JSON reports from two fresh tiny runs, "
                        f"differing: {diff or 'none'}")
    shutil.rmtree(tmp_path, ignore_errors=True)
    assert same

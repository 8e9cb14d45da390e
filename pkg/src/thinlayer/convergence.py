"""eps-sweeps: scaling of the micro solutions and two-scale errors against
the homogenised reconstructions.

Data recipes are closed forms in (xbar, z) with z = x_n / eps^alpha:

    f_eps(x)       = F(xbar, z)                 (bounded, so ||f|| ~ eps^(a/2))
    pb_eps(x)      = eps^alpha P(xbar, z)       (limit datum p0b = P(xbar, ±1))
    g_eps(t, x)    = G(xbar, z)                 (bounded)
    cb_eps(t, x)   = (1 - exp(-t/tau)) C(xbar, z),  so cb(0) = 0

which makes the limit data f0 = F, p0b = P(., ±1), gbar0 = |Y_f| G and
c0b = cb(., ±1) available analytically.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .cell_diffusion import DiffusionCase, cell_effective_diffusion
from .cell_stokes import cell_permeability, grid_function, reconstruct_u0
from .discrete import ScalarField, weighted_norms
from .errors import InsufficientPointsError, NonpositiveValueError, SamplerRangeError
from .geometry import InclusionSpec, as_fraction, build_layer, build_unit_cell, \
    check_admissible_scales
from .linsolve import MICRO_TOL
from .macro_darcy import DarcyProblem, grid_for_layer, solve_darcy, verify_darcy
from .macro_transport import MacroTransportProblem, solve_macro_transport
from .micro import (MicroStokesProblem, MicroTransportProblem, solve_micro_stokes,
                    solve_micro_transport)

SLOPE_TOL = 0.3
MIN_R2 = 0.95
FINAL_ERROR_MAX = 0.25
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class DataRecipe:
    """Amplitudes of the closed-form data (all zero gives the trivial problem)."""

    force_h: float = 0.25     # F_i = force_h sin(2 pi x_i), i < n
    force_v: float = 1.0      # F_n = force_v (1 + z/2 + cos(2 pi x_1)/4)
    pressure: float = 0.5     # P = -pressure z (1 + 0.4 cos(2 pi x_1))
    source: float = 1.0       # G = source (1 + sin(2 pi x_1)/2)
    conc: float = 1.0         # C = conc (1 + z)/2 (1 + cos(2 pi x_1)/4)
    tau: float = 0.25

    def F(self, xbar, z):
        out = [self.force_h * np.sin(TWO_PI * xi) + 0 * z for xi in xbar]
        out.append(self.force_v * (1 + 0.5 * z + 0.25 * np.cos(TWO_PI * xbar[0])))
        return out

    def P(self, xbar, z):
        return -self.pressure * z * (1 + 0.4 * np.cos(TWO_PI * xbar[0]))

    def G(self, xbar, z):
        return self.source * (1 + 0.5 * np.sin(TWO_PI * xbar[0])) + 0 * z

    def C(self, t, xbar, z):
        ramp = 1.0 - math.exp(-t / self.tau) if self.tau > 0 else 1.0
        return ramp * self.conc * 0.5 * (1 + z) * (1 + 0.25 * np.cos(TWO_PI * xbar[0]))

    def linf_bound(self, T: float) -> float:
        """Maximum principle bound sup|c^b| + T sup|g| (u divergence free)."""
        return abs(self.conc) * 1.25 + T * abs(self.source) * 1.5

    @property
    def is_zero(self) -> bool:
        return not any([self.force_h, self.force_v, self.pressure, self.source, self.conc])

    # micro data on a layer
    def micro(self, layer):
        ea = float(layer.eps_alpha)

        def f(*x):
            return self.F(x[:-1], x[-1] / ea)

        def pb(*x):
            return ea * self.P(x[:-1], x[-1] / ea)

        def g(t, *x):
            return self.G(x[:-1], x[-1] / ea)

        def cb(t, *x):
            return self.C(t, x[:-1], x[-1] / ea)

        return f, pb, g, cb

    # limit data on Omega
    def f0(self, *X):
        return self.F(X[:-1], X[-1])

    def p0b(self, side):
        return lambda *xbar: self.P(xbar, float(side) + 0 * xbar[0])

    def gbar0(self, porosity):
        return lambda t, *X: porosity * self.G(X[:-1], X[-1])

    def c0b(self, side):
        return lambda t, *xbar: self.C(t, xbar, float(side) + 0 * xbar[0])


ZERO_RECIPE = DataRecipe(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class SweepPlan:
    eps: Sequence
    alpha: object = Fraction(1, 2)
    n: int = 2
    m_c: int = 16
    inclusion: InclusionSpec = field(default_factory=lambda: InclusionSpec("ball", size=0.25))
    case: str = "D1"
    D: float = 1.0
    recipe: DataRecipe = field(default_factory=DataRecipe)
    T: float = 1.0
    dt: float = 0.05
    stokes_tol: float = MICRO_TOL
    transport: bool = True
    lateral: Optional[str] = None
    advection: str = "upwind"
    sigma: Optional[tuple] = None
    workers: int = 1

    def __post_init__(self):
        self.eps = [as_fraction(e) for e in self.eps]
        self.alpha = as_fraction(self.alpha)
        if len(self.eps) < 3:
            raise InsufficientPointsError("a sweep needs at least three eps values")
        if any(b >= a for a, b in zip(self.eps, self.eps[1:])):
            raise ValueError("eps values must be strictly decreasing")
        for e in self.eps:
            check_admissible_scales(e, self.alpha)


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    stderr: float = 0.0     # standard error of the slope (0 for an exact fit)

    def __iter__(self):
        return iter((self.slope, self.intercept, self.r2))


def fit_slope(points) -> SlopeFit:
    """Least squares line through (log eps, log value)."""
    pts = [(float(e), float(v)) for e, v in points]
    if len(pts) < 3:
        raise InsufficientPointsError(f"need at least 3 points, got {len(pts)}")
    if any(e <= 0 or v <= 0 for e, v in pts):
        raise NonpositiveValueError("slope fit needs positive eps and values")
    x = np.log([e for e, _ in pts])
    y = np.log([v for _, v in pts])
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    sse = float(np.sum(resid ** 2))
    r2 = 1.0 - sse / ss_tot if ss_tot > 0 else 1.0
    sxx = float(np.sum((x - x.mean()) ** 2))
    dof = len(pts) - 2
    stderr = math.sqrt(sse / dof / sxx) if dof > 0 and sxx > 0 else 0.0
    return SlopeFit(float(slope), float(icpt), r2, stderr)


def two_scale_error(micro_values, limit_values, weights, layer, limit_norm: Optional[float] = None,
                    z=None) -> float:
    """||v_eps - v0(x, x_n/eps^a, x/eps)|| / (eps^(a/2) ||v0||_{L2(Omega x Y_f)}).

    ``limit_values`` are v0 evaluated at the micro points; ``weights`` the
    quadrature weights of those points.  ``z`` (the rescaled vertical
    coordinates) is checked against the sampler range [-1, 1].  Without
    ``limit_norm`` the denominator is approximated by the discrete norm of
    the sampled limit, which converges to the same value.
    """
    if z is not None and np.any(np.abs(np.asarray(z)) > 1.0 + 1e-9):
        raise SamplerRangeError("points outside the rescaled layer -1 <= z <= 1")
    mv = np.asarray(micro_values, dtype=float)
    lv = np.asarray(limit_values, dtype=float)
    w = np.asarray(weights, dtype=float)
    num = math.sqrt(float(np.sum(w * (mv - lv) ** 2)))
    ea = float(layer.eps_alpha)
    if limit_norm is None:
        den = math.sqrt(float(np.sum(w * lv ** 2)))
    else:
        den = math.sqrt(ea) * limit_norm
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def field_two_scale_error(field: ScalarField, sampler, layer, limit_norm=None) -> float:
    """Two-scale error of a cell-centred micro field against ``sampler(X, y)``.

    ``X`` are the macro coordinates (xbar, x_n/eps^alpha) and ``y`` the cell
    coordinates x/eps mod 1 of the fluid cell centres.
    """
    m = field.mask
    X = [c[m] for c in field.grid.cell_coordinates()]
    ea = float(layer.eps_alpha)
    eps = float(layer.eps)
    macro = X[:-1] + [X[-1] / ea]
    y = [np.mod(c / eps, 1.0) for c in X]
    lim = np.asarray(sampler(macro, y), dtype=float)
    return two_scale_error(field.values[m], np.broadcast_to(lim, X[0].shape),
                           np.full(X[0].shape, field.grid.cell_volume), layer,
                           limit_norm=limit_norm, z=macro[-1])


# sweep


@dataclass
class EpsRecord:
    eps: str
    norms: dict
    errors: dict
    solver: dict
    seconds: float


@dataclass
class ConvergenceReport:
    alpha: str
    case: str
    records: list
    slopes: dict
    expected: dict
    checks: dict
    cell: dict
    degenerate: bool = False

    @property
    def passed(self) -> bool:
        return all(v for v in self.checks.values())

    def as_dict(self, timings: bool = False) -> dict:
        recs = []
        for r in self.records:
            d = asdict(r)
            if not timings:
                d.pop("seconds")
            recs.append(d)
        return {"alpha": self.alpha, "case": self.case, "records": recs,
                "slopes": self.slopes, "expected": self.expected, "checks": self.checks,
                "cell": self.cell, "degenerate": self.degenerate, "passed": self.passed}

    def to_json(self) -> str:
        # timings vary between runs; they are kept out of the report for byte identity
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        """Rows: quantity, eps, value, reference line c*eps^expected through the first point."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "eps", "value", "reference"])
            for q, expo in sorted(self.expected.items()):
                vals = [(Fraction(r.eps), r.norms.get(q)) for r in self.records]
                if not vals or vals[0][1] is None:
                    continue
                e0, v0 = vals[0]
                for e, v in vals:
                    ref = v0 * (float(e) / float(e0)) ** expo if v0 else 0.0
                    w.writerow([q, str(e), repr(float(v)), repr(float(ref))])


def _face_points(system, d):
    coords = system.grid.face_coordinates(d)
    return coords


def _velocity_error(sol, sampler, layer):
    """Two-scale error of eps^-2 u_eps against u0 over all face arrays."""
    eps = float(layer.eps)
    ea = float(layer.eps_alpha)
    sysm = sol.system
    comps = sysm.unstack(sol.u)
    mv, lv, wts, zs = [], [], [], []
    for d in range(layer.n):
        X = sysm.grid.face_coordinates(d)
        macro = list(X[:-1]) + [X[-1] / ea]
        y = [np.mod(Xk / eps, 1.0) for Xk in X]
        u0 = sampler.velocity(d, macro, y)
        mv.append((comps[d] / eps ** 2).ravel())
        lv.append(np.asarray(u0).ravel())
        wts.append(np.full(u0.size, sysm.grid.cell_volume))
        zs.append(macro[-1].ravel())
    return two_scale_error(np.concatenate(mv), np.concatenate(lv), np.concatenate(wts), layer,
                           z=np.concatenate(zs))


def _scalar_error(micro_field: ScalarField, limit: np.ndarray, layer, scale=1.0):
    m = micro_field.mask
    vol = micro_field.grid.cell_volume
    return two_scale_error(micro_field.values[m] * scale, limit[m], np.full(int(m.sum()), vol),
                           layer)


def _run_eps(plan: SweepPlan, eps, cell, K, stokes_sols, Dstar, porosity):
    t0 = time.perf_counter()
    layer = build_layer(cell, eps, plan.alpha, plan.sigma)
    ea = float(layer.eps_alpha)
    rec = plan.recipe
    f, pb, g, cb = rec.micro(layer)
    ms = solve_micro_stokes(MicroStokesProblem(layer, f, pb), tol=plan.stokes_tol)
    norms = {}
    un = weighted_norms(ms.velocity, layer)
    pn = weighted_norms(ms.pressure, layer)
    norms["u_l2"] = un.l2
    norms["u_grad"] = un.grad
    norms["p_l2"] = pn.l2
    solver = {"stokes_iterations": ms.iterations,
              "stokes_divergence_residual": ms.divergence_residual,
              "stokes_momentum_residual": ms.momentum_residual}
    errors = {}

    grid = grid_for_layer(layer)
    darcy = solve_darcy(DarcyProblem(K.K, rec.f0, rec.p0b(1), rec.p0b(-1), grid))
    diag = verify_darcy(darcy)
    solver["darcy_flux_variation"] = diag.flux_variation
    if not rec.is_zero:
        dnp0 = grid_function(grid.axes, darcy.dnp0)
        sampler = reconstruct_u0(stokes_sols, [lambda *X, i=i: rec.f0(*X)[i]
                                               for i in range(layer.n)], dnp0)
        errors["velocity"] = _velocity_error(ms, sampler, layer)
        p0 = darcy.p0
        errors["pressure"] = _scalar_error(ms.pressure, p0, layer, scale=1.0 / ea)
        colv = ms.column_velocity()
        # macro ubar^n averaged over the columns of each eps-cell
        m = cell.m
        un_macro = darcy.un_column.reshape(tuple(x for c in colv.shape for x in (c, m)))
        un_macro = un_macro.mean(axis=tuple(range(1, 2 * colv.ndim, 2)))
        denom = float(np.sqrt(np.mean(un_macro ** 2)))
        errors["column_flux"] = (float(np.sqrt(np.mean((colv - un_macro) ** 2))) / denom
                                 if denom > 0 else 0.0)

    if plan.transport:
        case = DiffusionCase(plan.case, plan.D)
        mt = solve_micro_transport(MicroTransportProblem(layer, case, ms, g=g, cb=cb,
                                                         T=plan.T, dt=plan.dt,
                                                         advection=plan.advection,
                                                         lateral=plan.lateral))
        cn = weighted_norms(mt.final_field, layer)
        norms["c_l2"] = cn.l2
        norms["c_linf"] = cn.linf
        solver["micro_transport_ledger"] = mt.max_ledger_residual
        macro = solve_macro_transport(MacroTransportProblem(
            plan.case, Dstar, darcy.un_column, grid, plan.T, plan.dt, porosity=porosity,
            gbar0=rec.gbar0(porosity), c0b_top=rec.c0b(1), c0b_bottom=rec.c0b(-1),
            advection=plan.advection))
        solver["macro_transport_ledger"] = macro.max_ledger_residual
        if not rec.is_zero:
            errors["concentration"] = _scalar_error(mt.final_field, macro.final, layer)
    return EpsRecord(str(layer.eps), norms, errors, solver, time.perf_counter() - t0)


def expected_exponents(alpha) -> dict:
    a = float(alpha)
    return {"u_l2": 2 + a / 2, "u_grad": 1 + a / 2, "p_l2": 1.5 * a, "c_l2": a / 2}


def scaling_study(plan: SweepPlan) -> ConvergenceReport:
    cell = build_unit_cell(plan.inclusion, plan.n, plan.m_c)
    K, stokes_sols = cell_permeability(cell)
    Dstar, _ = cell_effective_diffusion(cell, DiffusionCase(plan.case, plan.D))
    porosity = cell.porosity
    if plan.workers > 1:
        with ThreadPoolExecutor(plan.workers) as pool:
            records = list(pool.map(lambda e: _run_eps(plan, e, cell, K, stokes_sols,
                                                       Dstar, porosity), plan.eps))
    else:
        records = [_run_eps(plan, e, cell, K, stokes_sols, Dstar, porosity) for e in plan.eps]

    expected = expected_exponents(plan.alpha)
    if not plan.transport:
        expected.pop("c_l2")
    slopes, checks = {}, {}
    degenerate = all(v == 0.0 for r in records for v in r.norms.values())
    if not degenerate:
        for q in expected:
            pts = [(Fraction(r.eps), r.norms[q]) for r in records]
            fit = fit_slope(pts)
            slopes[q] = asdict(fit)
            if q != "c_l2":
                # the estimates are upper bounds: one-sided slope check
                checks[f"slope_{q}"] = bool(fit.slope >= expected[q] - SLOPE_TOL
                                            and fit.r2 >= MIN_R2)
        if plan.transport:
            bound = plan.recipe.linf_bound(plan.T)
            checks["linf_bounded"] = bool(all(r.norms["c_linf"] <= bound * (1 + 1e-12)
                                              for r in records))
        for q in ("velocity", "pressure", "concentration", "column_flux"):
            vals = [r.errors[q] for r in records if q in r.errors]
            if len(vals) == len(records):
                checks[f"decreasing_{q}"] = bool(all(b < a for a, b in zip(vals, vals[1:])))
                if q in ("pressure", "concentration"):
                    checks[f"final_{q}"] = bool(vals[-1] <= FINAL_ERROR_MAX)
    cellinfo = {"K": K.K.tolist(), "K_formula_discrepancy": K.formula_discrepancy,
                "Dstar": Dstar.Dstar.tolist(), "porosity": porosity, "m_c": plan.m_c,
                "inclusion": plan.inclusion.as_dict(), "n": plan.n}
    return ConvergenceReport(str(plan.alpha), plan.case, records, slopes, expected, checks,
                             cellinfo, degenerate)

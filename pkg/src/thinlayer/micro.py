"""Direct solvers for the microscopic problems in the thin perforated layer.

Stokes: MAC discretisation of

    ∫ grad u : grad phi - ∫ p div phi = ∫ f . phi - ∫_{S±} p_b nu . phi

with no-slip on the inclusions and lateral walls and the pressure (traction)
condition on the top and bottom entering only through the boundary term.

Transport: cell-centred finite volumes for

    eps^-a d_t c - div(D_eps grad c - u c / eps^2) = eps^-a g

with Dirichlet data on top/bottom, zero flux on the inclusions, lateral
Neumann (case D1) or Sigma-periodic (case D2), implicit Euler in time and
upwind advection by default.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cell_diffusion import DiffusionCase
from .discrete import (MacSystem, ScalarField, VectorField, assemble_mac_stokes,
                       fv_stiffness, traction_rhs)
from .errors import CFLWarning, GeometryError, ThinLayerError
from .geometry import LayerGeometry
from .linsolve import MICRO_TOL, SaddleSolver

DIV_TOL = 1e-6


class DivergenceError(ThinLayerError):
    """Advecting velocity is not discretely divergence free."""


# Stokes


@dataclass
class MicroStokesProblem:
    layer: LayerGeometry
    f: Callable                    # f(*x) -> n components, physical units
    pb: Callable                   # pb(*x) -> boundary pressure, evaluated on S±

    def __post_init__(self):
        if not isinstance(self.layer, LayerGeometry):
            raise GeometryError("problem needs a LayerGeometry")


@dataclass
class MicroStokesSolution:
    layer: LayerGeometry
    system: MacSystem = field(repr=False)
    u: np.ndarray = field(repr=False)   # stacked active faces
    p: np.ndarray = field(repr=False)   # fluid cells
    iterations: int = 0
    divergence_residual: float = 0.0
    momentum_residual: float = 0.0

    @property
    def velocity(self) -> VectorField:
        return self.system.velocity_field(self.u)

    @property
    def pressure(self) -> ScalarField:
        return self.system.pressure_field(self.p)

    def max_divergence(self) -> float:
        """max |B u| / (cell volume), i.e. the pointwise discrete divergence."""
        return float(np.abs(self.system.B @ self.u).max() / self.system.grid.cell_volume)

    def cut_fluxes(self) -> np.ndarray:
        """Net vertical flux through every horizontal face level."""
        un = self.system.unstack(self.u)[-1]
        area = self.system.grid.cell_volume / self.system.grid.spacing[-1]
        return un.sum(axis=tuple(range(un.ndim - 1))) * area

    def column_velocity(self) -> np.ndarray:
        """Vertical flux per eps-column, divided by eps^(n-1) eps^2 and
        averaged over all horizontal face levels (comparable to ubar^n)."""
        layer = self.layer
        n, m = layer.n, layer.cell.m
        eps = float(layer.eps)
        un = self.system.unstack(self.u)[-1]
        area = self.system.grid.cell_volume / self.system.grid.spacing[-1]
        cols = layer.cells_per_axis[:-1]
        shape = []
        for c in cols:
            shape += [c, m]
        blocks = un.reshape(tuple(shape) + (un.shape[-1],))
        sums = blocks.sum(axis=tuple(range(1, 2 * (n - 1), 2)))
        return sums.mean(axis=-1) * area / eps ** (n - 1) / eps ** 2


def solve_micro_stokes(problem: MicroStokesProblem, tol: float = MICRO_TOL,
                       max_iter: int = 5000) -> MicroStokesSolution:
    layer = problem.layer
    grid = layer.grid()
    system = assemble_mac_stokes(grid, layer.fluid_mask, layer.stokes_bc())
    rhs = system.sample_faces(problem.f) * system.mass_vector + traction_rhs(system, problem.pb)
    solver = SaddleSolver(system.blocks, system.B, system.pressure_mass,
                          pressure_nullspace=system.pressure_nullspace,
                          inner="lu" if layer.n == 2 else "cg")
    # warm start: in every column interpolate the traction data linearly in x_n
    X = [c[system.fluid] for c in grid.cell_coordinates()]
    ea = float(layer.eps_alpha)
    lo = np.broadcast_to(problem.pb(*X[:-1], np.full_like(X[-1], -ea)), X[-1].shape)
    hi = np.broadcast_to(problem.pb(*X[:-1], np.full_like(X[-1], ea)), X[-1].shape)
    guess = lo + (hi - lo) * (X[-1] + ea) / (2 * ea)
    # the saddle solver works with -p (its B^T block is +div^T)
    res = solver.solve(rhs, tol=tol, max_iter=max_iter, p0=-guess)
    return MicroStokesSolution(layer, system, res.u, -res.p, res.iterations,
                               res.divergence_residual, res.momentum_residual)


# transport


@dataclass
class MicroTransportProblem:
    layer: LayerGeometry
    case: DiffusionCase
    velocity: Optional[MicroStokesSolution]    # None means u = 0
    g: object = None        # callable (t, *x) or constant; bounded source
    cb: object = 0.0        # callable (t, *x) evaluated on S±, or constant
    T: float = 1.0
    dt: float = 0.05
    snapshot_times: Sequence[float] = ()
    advection: str = "upwind"
    lateral: Optional[str] = None   # "neumann" | "periodic"; default by case

    def __post_init__(self):
        if self.lateral is None:
            self.lateral = "periodic" if self.case.kind == "D2" else "neumann"
        if self.lateral not in ("neumann", "periodic"):
            raise ValueError("lateral must be 'neumann' or 'periodic'")
        if self.case.kind == "D2" and self.lateral != "periodic":
            raise GeometryError("case D2 needs Sigma-periodic lateral conditions")
        if self.layer.n > 4:
            raise GeometryError("transport is restricted to n <= 4")
        if self.advection not in ("upwind", "central"):
            raise ValueError("unknown advection scheme")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def nsteps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class MicroTransportSolution:
    layer: LayerGeometry
    grid: object
    times: list
    snapshots: list          # full-grid arrays, zero on solid cells
    ledger: list = field(repr=False)
    final: np.ndarray = field(repr=False, default=None)

    def field(self, k: int = -1) -> ScalarField:
        vals = self.snapshots[k] if self.snapshots else self.final
        return ScalarField(self.grid, vals, self.layer.fluid_mask.copy())

    @property
    def final_field(self) -> ScalarField:
        return ScalarField(self.grid, self.final, self.layer.fluid_mask.copy())

    @property
    def max_ledger_residual(self) -> float:
        return max((abs(r["residual"]) for r in self.ledger), default=0.0)


def _value(spec, t, coords, shape):
    if spec is None:
        return np.zeros(shape)
    if callable(spec):
        return np.broadcast_to(np.asarray(spec(t, *coords), dtype=float), shape).copy()
    return np.broadcast_to(np.asarray(spec, dtype=float), shape).copy()


def _face_velocity_on(grid, layer, sol: Optional[MicroStokesSolution]):
    """Face velocities per axis in the transport grid's face layout.

    The Stokes grid is bounded laterally; a periodic transport grid has one
    face fewer per lateral axis (the wrap face, a wall, carries u = 0).
    """
    if sol is None:
        return [np.zeros(grid.face_shape(d)) for d in range(grid.dim)]
    comps = sol.system.unstack(sol.u)
    out = []
    for d, c in enumerate(comps):
        if grid.periodic[d]:
            sl = [slice(None)] * grid.dim
            sl[d] = slice(0, grid.shape[d])
            c = c[tuple(sl)].copy()
        out.append(c)
    return out


def _check_divergence(sol: MicroStokesSolution):
    if sol is None:
        return
    div = np.abs(sol.system.B @ sol.u)
    scale = np.abs(sol.u).max() * sol.system.grid.cell_volume / sol.system.grid.spacing[0]
    if scale > 0 and div.max() > DIV_TOL * scale:
        raise DivergenceError(f"advecting velocity divergence {div.max() / scale:.2e} (relative)")


def solve_micro_transport(problem: MicroTransportProblem) -> MicroTransportSolution:
    layer = problem.layer
    n = layer.n
    case = problem.case
    periodic = problem.lateral == "periodic"
    grid = layer.grid(lateral_periodic=periodic)
    fluid = layer.fluid_mask
    _check_divergence(problem.velocity)
    ea = float(layer.eps_alpha)
    eps = float(layer.eps)
    h = grid.spacing
    vol = grid.cell_volume
    N = int(fluid.sum())
    idx = np.full(grid.shape, -1, dtype=np.int64)
    idx[fluid] = np.arange(N)
    coef = case.micro_coefficients(ea, n)

    # diffusion between fluid cells, then Dirichlet half-cells on top/bottom
    L = fv_stiffness(grid, fluid, coef)
    diag_bc = np.zeros(N)
    top = [slice(None)] * n
    bot = [slice(None)] * n
    top[-1] = -1
    bot[-1] = 0
    bot_idx = idx[tuple(bot)]
    top_idx = idx[tuple(top)]
    bot_ok = bot_idx >= 0
    top_ok = top_idx >= 0
    wD = 2.0 * coef[-1] * vol / h[-1] ** 2
    np.add.at(diag_bc, bot_idx[bot_ok], wD)
    np.add.at(diag_bc, top_idx[top_ok], wD)

    # advection: flux (u/eps^2) c_up through every face with nonzero velocity
    U = _face_velocity_on(grid, layer, problem.velocity)
    rows, cols, vals = [], [], []
    area = [vol / h[d] for d in range(n)]
    max_peclet = 0.0
    for d in range(n):
        ud = U[d] / eps ** 2
        if grid.periodic[d]:
            # face k sits between cells k-1 (wrapped) and k
            face_u = ud
            left, right = np.roll(idx, 1, axis=d), idx
        else:
            sl_i = [slice(None)] * n
            sl_i[d] = slice(1, -1)
            face_u = ud[tuple(sl_i)]
            left = idx[tuple([slice(None)] * d + [slice(0, -1)])]
            right = idx[tuple([slice(None)] * d + [slice(1, None)])]
        ok = (left >= 0) & (right >= 0) & (face_u != 0)
        fu, l, r = face_u[ok] * area[d], left[ok], right[ok]
        if problem.advection == "upwind":
            wl, wr = np.maximum(fu, 0.0), np.minimum(fu, 0.0)
        else:
            wl = wr = 0.5 * fu
            max_peclet = max(max_peclet, float(np.abs(ud).max(initial=0.0)) * h[d] / coef[d])
        # outflow of left cell: wl c_l + wr c_r; inflow to right cell: same
        rows += [l, l, r, r]
        cols += [l, r, l, r]
        vals += [wl, wr, -wl, -wr]
    if problem.advection == "central" and max_peclet > 2.0:
        warnings.warn(f"cell Peclet number {max_peclet:.2f} > 2 with central advection",
                      CFLWarning)
    # boundary faces on S±: outflow uses the cell value, inflow the datum
    ub = U[-1] / eps ** 2
    ub_bot = ub[tuple(bot)][bot_ok] * area[-1]   # positive = into the layer
    ub_top = ub[tuple(top)][top_ok] * area[-1]   # positive = out of the layer
    out_b = np.where(ub_bot < 0, -ub_bot, 0.0)
    out_t = np.where(ub_top > 0, ub_top, 0.0)
    if problem.advection == "central":
        # face value is the datum itself on both boundaries
        out_b = np.zeros_like(out_b)
        out_t = np.zeros_like(out_t)
    np.add.at(diag_bc, bot_idx[bot_ok], out_b)
    np.add.at(diag_bc, top_idx[top_ok], out_t)
    Adv = sp.coo_matrix((np.concatenate(vals) if vals else np.zeros(0),
                         (np.concatenate(rows) if rows else np.zeros(0, int),
                          np.concatenate(cols) if cols else np.zeros(0, int))),
                        shape=(N, N)).tocsr()
    Lmat = (L + Adv + sp.diags(diag_bc)).tocsc()
    mass = vol / ea / problem.dt
    lu = spla.splu((sp.identity(N, format="csc") * mass + Lmat).tocsc())

    coords = [c[fluid] for c in grid.cell_coordinates()]
    fc = grid.face_coordinates(n - 1)
    bcoords = [c[tuple(bot)][bot_ok] for c in fc]
    # the top face row of the bounded vertical axis has index shape[-1]
    tsl = [slice(None)] * n
    tsl[-1] = grid.shape[-1]
    tcoords = [c[tuple(tsl)][top_ok] for c in fc]

    def boundary_terms(t):
        cb_b = _value(problem.cb, t, bcoords, bcoords[0].shape)
        cb_t = _value(problem.cb, t, tcoords, tcoords[0].shape)
        in_b = np.where(ub_bot > 0, ub_bot, 0.0)
        in_t = np.where(ub_top < 0, -ub_top, 0.0)
        if problem.advection == "central":
            in_b = ub_bot
            in_t = -ub_top
        r = np.zeros(N)
        np.add.at(r, bot_idx[bot_ok], (wD + in_b) * cb_b)
        np.add.at(r, top_idx[top_ok], (wD + in_t) * cb_t)
        return r, cb_b, cb_t, in_b, in_t

    c = np.zeros(N)
    snaps_req = sorted(set(float(s) for s in problem.snapshot_times))
    times, snaps, ledger = [], [], []

    def full(x):
        a = np.zeros(grid.shape)
        a[fluid] = x
        return a

    if any(abs(s) < 0.5 * problem.dt for s in snaps_req):
        times.append(0.0)
        snaps.append(full(c))
    for step in range(1, problem.nsteps + 1):
        t = step * problem.dt
        gvals = _value(problem.g, t, coords, (N,))
        r, cb_b, cb_t, in_b, in_t = boundary_terms(t)
        rhs = mass * c + vol * gvals / ea + r
        c_new = lu.solve(rhs)
        # ledger: eps^-a mass rate = boundary inflow + eps^-a source
        cb_cells = c_new[bot_idx[bot_ok]]
        ct_cells = c_new[top_idx[top_ok]]
        flux_b = float(np.sum(wD * (cb_b - cb_cells) + in_b * cb_b - out_b * cb_cells))
        flux_t = float(np.sum(wD * (cb_t - ct_cells) + in_t * cb_t - out_t * ct_cells))
        storage = float(np.sum(c_new - c)) * mass
        source = float(np.sum(gvals)) * vol / ea
        scale = max(abs(storage), abs(flux_b) + abs(flux_t), abs(source), 1e-300)
        ledger.append({"t": t, "storage_rate": storage, "boundary_inflow": flux_b + flux_t,
                       "source": source, "residual": (storage - flux_b - flux_t - source) / scale})
        c = c_new
        if any(abs(s - t) < 0.5 * problem.dt for s in snaps_req):
            times.append(t)
            snaps.append(full(c))
    return MicroTransportSolution(layer, grid, times, snaps, ledger, full(c))

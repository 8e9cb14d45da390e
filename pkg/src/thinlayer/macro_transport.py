"""Macroscopic transport models on Omega = Sigma x (-1, 1).

    |Y_f| d_t c0 - div(D* grad c0 - c0 u_n e_n) = g0     (case D2, Sigma-periodic)
    |Y_f| d_t c0 - d_n(D*_nn d_n c0 - c0 u_n)   = g0     (case D1, per column)

with Dirichlet data on x_n = ±1 and c0(0) = 0.  Cell-centred finite volumes
on the macro grid, upwind (default) or central vertical advection, implicit
Euler (default) or Crank-Nicolson in time.  Case D1 runs batched
tridiagonal sweeps over all columns; case D2 factorises the 2-D/3-D
operator once with sparse LU (velocity and step are frozen).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .errors import DimensionMismatchError, NonphysicalNegativityError, StructureViolationError
from .macro_darcy import MacroGrid

NEG_TOL = 1e-12


def _time_field(spec, t, coords, shape):
    if spec is None:
        return np.zeros(shape)
    if callable(spec):
        return np.broadcast_to(np.asarray(spec(t, *coords), dtype=float), shape).copy()
    return np.broadcast_to(np.asarray(spec, dtype=float), shape).copy()


@dataclass
class MacroTransportProblem:
    case: str                      # "D1" or "D2"
    Dstar: np.ndarray              # n x n (only the diagonal is used)
    ubar_n: np.ndarray             # per-column vertical Darcy velocity
    grid: MacroGrid
    T: float
    dt: float
    porosity: float = 1.0
    gbar0: object = None           # callable (t, *x) or constant
    c0b_top: object = 0.0          # callable (t, *xbar) or constant
    c0b_bottom: object = 0.0
    snapshot_times: Sequence[float] = ()
    advection: str = "upwind"      # or "central"
    time_scheme: str = "euler"     # or "cn"

    def __post_init__(self):
        self.Dstar = np.asarray(getattr(self.Dstar, "Dstar", self.Dstar), dtype=float)
        n = self.grid.n
        if self.case not in ("D1", "D2"):
            raise ValueError(f"unknown case {self.case!r}")
        if self.Dstar.shape != (n, n):
            raise DimensionMismatchError("D* does not match the grid dimension")
        if not (self.dt > 0 and self.T >= 0):
            raise ValueError("need dt > 0 and T >= 0")
        if self.advection not in ("upwind", "central") or self.time_scheme not in ("euler", "cn"):
            raise ValueError("unknown scheme flag")
        u = np.asarray(self.ubar_n, dtype=float)
        cols = self.grid.column_shape
        if u.shape == cols + (self.grid.nz,):
            u = u.mean(axis=-1)
        self.ubar_n = np.broadcast_to(u, cols).copy()
        if self.case == "D2" and n > 1:
            off = self.Dstar[:n - 1, :n - 1] - np.diag(np.diag(self.Dstar)[:n - 1])
            if np.abs(off).max(initial=0.0) > 1e-12 * np.abs(self.Dstar).max():
                raise StructureViolationError("horizontal D* must be diagonal for this solver")

    @property
    def nsteps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class MacroTransportSolution:
    grid: MacroGrid
    times: list
    snapshots: list              # arrays (*columns, nz) at ``times``
    ledger: list = field(repr=False)
    final: np.ndarray = field(repr=False, default=None)

    def snapshot(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return self.snapshots[k]

    @property
    def max_ledger_residual(self) -> float:
        return max((abs(r["residual"]) for r in self.ledger), default=0.0)

    def write_csv(self, path) -> None:
        """Rows: time, flat column index, x_n, c0."""
        nz = self.grid.nz
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "column", "x_n", "c0"])
            for t, c in zip(self.times, self.snapshots):
                flat = c.reshape(-1, nz)
                for j in range(flat.shape[0]):
                    for k, z in enumerate(self.grid.z):
                        w.writerow([repr(float(t)), j, repr(float(z)), repr(float(flat[j, k]))])


def _thomas(a, b, c, d):
    """Batched tridiagonal solve along the last axis (a: sub, b: diag, c: super)."""
    n = b.shape[-1]
    cp = np.empty_like(b)
    dp = np.empty_like(d)
    cp[..., 0] = c[..., 0] / b[..., 0]
    dp[..., 0] = d[..., 0] / b[..., 0]
    for k in range(1, n):
        den = b[..., k] - a[..., k] * cp[..., k - 1]
        cp[..., k] = c[..., k] / den
        dp[..., k] = (d[..., k] - a[..., k] * dp[..., k - 1]) / den
    x = np.empty_like(d)
    x[..., -1] = dp[..., -1]
    for k in range(n - 2, -1, -1):
        x[..., k] = dp[..., k] - cp[..., k] * x[..., k + 1]
    return x


class _VerticalOperator:
    """Integrated (per unit horizontal area) vertical flux operator.

    Net outflow of cell k is  J_{k+1/2} - J_{k-1/2}; with J = u c_up - Dnn dc/dz.
    Represented as tridiagonal (lower, diag, upper) plus boundary coupling
    vectors so that  L c = A_tri c - (e_0 beta_lo C_lo + e_last beta_hi C_hi).
    """

    def __init__(self, u, Dnn, dz, nz, advection):
        self.u = u
        shape = u.shape + (nz + 1,)
        uf = np.broadcast_to(u[..., None], shape)
        if advection == "upwind":
            wl = np.maximum(uf, 0.0)
            wr = np.minimum(uf, 0.0)
        else:
            wl = 0.5 * uf
            wr = 0.5 * uf
            # boundary faces carry the Dirichlet value itself
            wl = wl.copy()
            wr = wr.copy()
            wl[..., 0] = uf[..., 0]
            wr[..., 0] = 0.0
            wl[..., -1] = 0.0
            wr[..., -1] = uf[..., -1]
        gd = np.full(shape, Dnn / dz)
        gd[..., 0] = gd[..., -1] = 2.0 * Dnn / dz
        # J_f = wl c_left + wr c_right + gd (c_left - c_right)
        self.JL = wl + gd
        self.JR = wr - gd
        self.nz = nz

    def tridiagonal(self):
        JL, JR = self.JL, self.JR
        # row k: (J_{k+1/2} - J_{k-1/2}) = JL[k+1] c_k + JR[k+1] c_{k+1} - JL[k] c_{k-1} - JR[k] c_k
        diag = JL[..., 1:] - JR[..., :-1]
        upper = JR[..., 1:].copy()
        lower = -JL[..., :-1].copy()
        upper[..., -1] = 0.0
        lower[..., 0] = 0.0
        return lower, diag, upper

    def boundary_rhs(self, C_lo, C_hi):
        """Contribution moved to the right-hand side by the Dirichlet values."""
        r = np.zeros(self.u.shape + (self.nz,))
        r[..., 0] += self.JL[..., 0] * C_lo
        r[..., -1] -= self.JR[..., -1] * C_hi
        return r

    def face_fluxes(self, c, C_lo, C_hi):
        ext = np.concatenate([C_lo[..., None], c, C_hi[..., None]], axis=-1)
        return self.JL * ext[..., :-1] + self.JR * ext[..., 1:]

    def apply(self, c, C_lo, C_hi):
        J = self.face_fluxes(c, C_lo, C_hi)
        return np.diff(J, axis=-1)


def solve_macro_transport(problem: MacroTransportProblem) -> MacroTransportSolution:
    grid = problem.grid
    n = grid.n
    nz, dz = grid.nz, grid.dz
    cols = grid.column_shape
    phi = problem.porosity
    Dnn = problem.Dstar[-1, -1]
    dt = problem.dt
    theta = 1.0 if problem.time_scheme == "euler" else 0.5
    vop = _VerticalOperator(problem.ubar_n, Dnn, dz, nz, problem.advection)
    lower, diag, upper = vop.tridiagonal()
    ccoords = grid.column_coordinates()
    coords = grid.coordinates()

    # horizontal periodic diffusion (case D2): integrated per unit vertical/cell width
    H = None
    if problem.case == "D2" and n > 1:
        H = _horizontal_operator(grid, np.diag(problem.Dstar)[:n - 1])
    ncell = int(np.prod(grid.shape))
    if H is not None:
        V = _tridiag_to_sparse(lower, diag, upper)
        Lmat = (V + H).tocsc()
        lhs = (sp.identity(ncell, format="csc") * (phi * dz / dt) + theta * Lmat).tocsc()
        lu = spla.splu(lhs)
    else:
        Lmat = None
        lu = None

    def bc(t):
        return (_time_field(problem.c0b_bottom, t, ccoords, cols),
                _time_field(problem.c0b_top, t, ccoords, cols))

    def src(t):
        return _time_field(problem.gbar0, t, coords, grid.shape)

    def apply_L(c, C_lo, C_hi):
        out = vop.apply(c, C_lo, C_hi)
        if H is not None:
            out = out + (H @ c.ravel()).reshape(c.shape)
        return out

    c = np.zeros(grid.shape)
    snaps_req = sorted(set(float(t) for t in problem.snapshot_times))
    times, snaps, ledger = [], [], []
    if any(abs(t) < 0.5 * dt for t in snaps_req):
        times.append(0.0)
        snaps.append(c.copy())
    t = 0.0
    C_lo, C_hi = bc(0.0)
    g_old = src(0.0)
    for step in range(1, problem.nsteps + 1):
        t_new = step * dt
        C_lo_n, C_hi_n = bc(t_new)
        g_new = src(t_new)
        rhs = (phi * dz / dt) * c + dz * (theta * g_new + (1 - theta) * g_old)
        rhs = rhs + theta * vop.boundary_rhs(C_lo_n, C_hi_n)
        if theta < 1.0:
            rhs = rhs - (1 - theta) * apply_L(c, C_lo, C_hi)
        if lu is None:
            c_new = _thomas(theta * lower, phi * dz / dt + theta * diag, theta * upper, rhs)
        else:
            c_new = lu.solve(rhs.ravel()).reshape(grid.shape)

        # ledger: storage change vs boundary inflow and sources (per unit horizontal area)
        J_new = vop.face_fluxes(c_new, C_lo_n, C_hi_n)
        J_old = vop.face_fluxes(c, C_lo, C_hi)
        J = theta * J_new + (1 - theta) * J_old
        cell_area = _column_area(grid)
        storage = phi * dz * float(np.sum((c_new - c) * cell_area[..., None])) / dt
        inflow = float(np.sum((J[..., 0] - J[..., -1]) * cell_area))
        source = dz * float(np.sum((theta * g_new + (1 - theta) * g_old) * cell_area[..., None]))
        flux_mag = float(np.sum((np.abs(J[..., 0]) + np.abs(J[..., -1])) * cell_area))
        scale = max(abs(storage), flux_mag, abs(source), 1e-300)
        ledger.append({"t": t_new, "mass": phi * dz * float(np.sum(c_new * cell_area[..., None])),
                       "storage_rate": storage, "boundary_inflow": inflow, "source": source,
                       "residual": (storage - inflow - source) / scale})

        if problem.advection == "upwind" and theta == 1.0 and np.all(g_new >= 0):
            lo = min(0.0, float(C_lo_n.min()), float(C_hi_n.min()), float(c.min()))
            if c_new.min() < lo - NEG_TOL:
                raise NonphysicalNegativityError(
                    f"c0 = {c_new.min():.3e} below the data hull at t = {t_new:.4g}")
        c, C_lo, C_hi, g_old, t = c_new, C_lo_n, C_hi_n, g_new, t_new
        if any(abs(s - t) < 0.5 * dt for s in snaps_req):
            times.append(t)
            snaps.append(c.copy())
    return MacroTransportSolution(grid, times, snaps, ledger, c)


def _column_area(grid: MacroGrid) -> np.ndarray:
    """Horizontal measure attached to each column (uniform spacing assumed)."""
    area = np.ones(grid.column_shape)
    for a, x in enumerate(grid.xbar):
        hx = x[1] - x[0] if x.size > 1 else 1.0
        shape = [1] * len(grid.xbar)
        shape[a] = x.size
        area = area * np.full(shape, hx)
    return area


def _tridiag_to_sparse(lower, diag, upper):
    nz = diag.shape[-1]
    ncol = diag.size // nz
    lo = lower.reshape(ncol, nz)
    di = diag.reshape(ncol, nz)
    up = upper.reshape(ncol, nz)
    base = (np.arange(ncol) * nz)[:, None]
    k = np.arange(nz)[None, :]
    rows = [base + k, base + k[:, 1:], base + k[:, :-1]]
    cols = [base + k, base + k[:, 1:] - 1, base + k[:, :-1] + 1]
    vals = [di, lo[:, 1:], up[:, :-1]]
    N = ncol * nz
    return sp.coo_matrix((np.concatenate([v.ravel() for v in vals]),
                          (np.concatenate([r.ravel() for r in rows]),
                           np.concatenate([c.ravel() for c in cols]))), shape=(N, N)).tocsr()


def _horizontal_operator(grid: MacroGrid, Dh) -> sp.csr_matrix:
    """Periodic -d_i(D_ii d_i c) integrated over dz (per unit horizontal area)."""
    shape = grid.shape
    N = int(np.prod(shape))
    idx = np.arange(N).reshape(shape)
    rows, cols, vals = [], [], []
    for a, x in enumerate(grid.xbar):
        if x.size < 2:
            continue
        hx = x[1] - x[0]
        w = Dh[a] * grid.dz / hx ** 2
        nb = np.roll(idx, -1, axis=a)
        rows += [idx.ravel(), nb.ravel(), idx.ravel(), nb.ravel()]
        cols += [idx.ravel(), nb.ravel(), nb.ravel(), idx.ravel()]
        vals += [np.full(N, w), np.full(N, w), np.full(N, -w), np.full(N, -w)]
    if not rows:
        return sp.csr_matrix((N, N))
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(N, N)).tocsr()


def steady_profile(z, v, Dnn):
    """Closed-form steady solution with c(-1) = 0, c(1) = 1, no source."""
    z = np.asarray(z, dtype=float)
    if v == 0:
        return 0.5 * (1 + z)
    r = v / Dnn
    # expm1 keeps small |r| accurate; the shifted form avoids overflow for large r > 0
    if r > 0:
        return np.exp(r * (z - 1)) * np.expm1(-r * (z + 1)) / np.expm1(-2 * r)
    return np.expm1(r * (z + 1)) / np.expm1(2 * r)


# correctors


def _gradient(c0, grid: MacroGrid, periodic_horizontal: bool):
    """d c0 / d x_a for every axis: central differences, one-sided at bounded ends."""
    out = []
    for a, x in enumerate(grid.xbar):
        if x.size < 2:
            out.append(np.zeros_like(c0))
            continue
        hx = x[1] - x[0]
        if periodic_horizontal:
            out.append((np.roll(c0, -1, axis=a) - np.roll(c0, 1, axis=a)) / (2 * hx))
        else:
            out.append(np.gradient(c0, hx, axis=a, edge_order=1 if x.size < 3 else 2))
    out.append(np.gradient(c0, grid.dz, axis=-1, edge_order=1 if grid.nz < 3 else 2))
    return out


def _periodic_cell_sample(arr, y):
    m = arr.shape[0]
    pts = np.stack([np.asarray(yk, dtype=float).ravel() * m - 0.5 for yk in y])
    return ndimage.map_coordinates(arr, pts, order=1, mode="grid-wrap").reshape(np.shape(y[0]))


class CorrectorSampler:
    """First-order correctors c1bar = sum_i d_i c0 chi_i and c1 = d_n c0 chi_n.

    Evaluated at macro grid nodes (index tuples) and cell points y.
    """

    def __init__(self, case: str, c0, grid: MacroGrid, solutions):
        self.case = case
        self.grid = grid
        self.grad = _gradient(np.asarray(c0, dtype=float), grid, case == "D2")
        self.solutions = solutions

    def horizontal(self, node_index, y) -> np.ndarray:
        out = 0.0
        for i, corr in enumerate(self.solutions.horizontal):
            out = out + self.grad[i][node_index] * _periodic_cell_sample(corr.values, y)
        return out

    def vertical(self, node_index, y) -> np.ndarray:
        v = self.solutions.vertical
        if hasattr(v, "sample"):
            chi = v.sample(y[-1])
        else:
            chi = _periodic_cell_sample(v.values, y)
        return self.grad[-1][node_index] * chi

    def total(self, node_index, y) -> np.ndarray:
        if self.case == "D2":
            return self.horizontal(node_index, y) + self.vertical(node_index, y)
        return self.vertical(node_index, y)


def reconstruct_correctors(case: str, c0, solutions, grid: MacroGrid) -> CorrectorSampler:
    return CorrectorSampler(case, c0, grid, solutions)

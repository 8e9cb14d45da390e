"""Limit Darcy problem on Omega = Sigma x (-1, 1).

Only vertical derivatives appear,

    d/dx_n [K (f0 - e_n d_n p0)]_n = 0,   p0 = p0b on x_n = ±1,

so every horizontal column is an independent two-point problem.  Cell
centred finite volumes on a vertical grid: the face flux is
F = b~ - K_nn dp/dz with b~ the trapezoidal mean of b = (K f0)_n over the
face's dual interval (exact for b linear in x_n).  All columns share one
SPD tridiagonal matrix, solved at once with multiple right-hand sides.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solveh_banded

from .errors import DimensionMismatchError, SingularKError

DARCY_TOL = 1e-10


@dataclass(frozen=True)
class MacroGrid:
    """Columns at the points of ``xbar`` (one 1-D array per horizontal axis),
    ``nz`` uniform cells on (-1, 1) with unknowns at the cell centres."""

    xbar: tuple
    nz: int

    def __post_init__(self):
        object.__setattr__(self, "xbar", tuple(np.asarray(a, dtype=float) for a in self.xbar))
        if self.nz < 2:
            raise ValueError("need at least two vertical cells")

    @property
    def n(self) -> int:
        return len(self.xbar) + 1

    @property
    def dz(self) -> float:
        return 2.0 / self.nz

    @property
    def z(self) -> np.ndarray:
        return -1.0 + (np.arange(self.nz) + 0.5) * self.dz

    @property
    def z_faces(self) -> np.ndarray:
        return -1.0 + np.arange(self.nz + 1) * self.dz

    @property
    def column_shape(self) -> tuple:
        return tuple(a.size for a in self.xbar)

    @property
    def shape(self) -> tuple:
        return self.column_shape + (self.nz,)

    def column_coordinates(self) -> list:
        return list(np.meshgrid(*self.xbar, indexing="ij"))

    def coordinates(self, z: Optional[np.ndarray] = None) -> list:
        z = self.z if z is None else z
        return list(np.meshgrid(*self.xbar, z, indexing="ij"))

    @property
    def axes(self) -> tuple:
        return self.xbar + (self.z,)


def grid_for_layer(layer) -> MacroGrid:
    """Macro grid whose nodes are the micro cell centres with x_n rescaled by eps^-alpha."""
    g = layer.grid()
    xbar = tuple(g.cell_centers(a) for a in range(layer.n - 1))
    return MacroGrid(xbar, g.shape[-1])


def _field(spec, coords, shape):
    if callable(spec):
        return np.broadcast_to(np.asarray(spec(*coords), dtype=float), shape).copy()
    return np.broadcast_to(np.asarray(spec, dtype=float), shape).copy()


def _vector(spec, coords, n, shape):
    if callable(spec):
        vals = spec(*coords)
    else:
        vals = spec
    if np.ndim(vals) == 0 or len(vals) != n:
        raise DimensionMismatchError(f"vector data needs {n} components")
    return np.stack([np.broadcast_to(np.asarray(v, dtype=float), shape) for v in vals])


@dataclass
class DarcyProblem:
    K: np.ndarray
    f0: object          # callable f0(*x) -> n components, or array (n, *grid.shape)
    p0b_top: object     # callable of xbar, scalar, or array over columns
    p0b_bottom: object
    grid: MacroGrid

    def __post_init__(self):
        self.K = np.asarray(getattr(self.K, "K", self.K), dtype=float)
        n = self.grid.n
        if self.K.shape != (n, n):
            raise DimensionMismatchError(f"K has shape {self.K.shape}, expected {(n, n)}")


@dataclass
class DarcySolution:
    grid: MacroGrid
    K: np.ndarray
    p0: np.ndarray          # (*columns, nz)
    ubar: np.ndarray        # (n, *columns, nz)
    dnp0: np.ndarray        # d_n p0 at the nodes
    face_flux: np.ndarray   # (*columns, nz+1) vertical Darcy flux at faces
    un_column: np.ndarray   # per-column constant vertical Darcy velocity
    p0b_top: np.ndarray
    p0b_bottom: np.ndarray
    b_nodes: np.ndarray = field(repr=False)      # (K f0)_n at nodes
    b_bounds: tuple = field(repr=False)          # (K f0)_n at x_n = -1, +1

    def write_csv(self, path) -> None:
        """Rows: flat column index, x_n, p0, ubar components (fixed C order)."""
        n = self.grid.n
        ncol = int(np.prod(self.grid.column_shape)) if self.grid.column_shape else 1
        p = self.p0.reshape(ncol, self.grid.nz)
        u = self.ubar.reshape(n, ncol, self.grid.nz)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["column", "x_n", "p0"] + [f"u{i + 1}" for i in range(n)])
            for c in range(ncol):
                for k, z in enumerate(self.grid.z):
                    w.writerow([c, repr(float(z)), repr(float(p[c, k]))]
                               + [repr(float(u[i, c, k])) for i in range(n)])


def solve_darcy(problem: DarcyProblem) -> DarcySolution:
    grid = problem.grid
    K = problem.K
    n = grid.n
    Knn = K[-1, -1]
    if not Knn > 0:
        raise SingularKError(f"K_nn = {Knn} is not positive")
    nz, dz = grid.nz, grid.dz
    cols = grid.column_shape
    ccoords = grid.column_coordinates()
    coords = grid.coordinates()
    f0 = _vector(problem.f0, coords, n, grid.shape)
    b = np.tensordot(K[-1], f0, axes=1)                       # (K f0)_n at nodes
    zb = [np.full(cols, -1.0), np.full(cols, 1.0)]
    fb = [_vector(problem.f0, ccoords + [z], n, cols) for z in zb]
    b_lo, b_hi = (np.tensordot(K[-1], f, axes=1) for f in fb)
    P_lo = _field(problem.p0b_bottom, ccoords, cols)
    P_hi = _field(problem.p0b_top, ccoords, cols)

    # trapezoidal means of b over the nz+1 dual intervals
    btil = np.empty(cols + (nz + 1,))
    btil[..., 0] = 0.5 * (b_lo + b[..., 0])
    btil[..., -1] = 0.5 * (b[..., -1] + b_hi)
    btil[..., 1:-1] = 0.5 * (b[..., :-1] + b[..., 1:])
    g = np.full(nz + 1, Knn / dz)
    g[0] = g[-1] = 2.0 * Knn / dz

    # row k: -g_{k+1} p_{k+1} + (g_k + g_{k+1}) p_k - g_k p_{k-1} = btil_k - btil_{k+1}
    ab = np.zeros((2, nz))
    ab[0, 1:] = -g[1:-1]
    ab[1] = g[:-1] + g[1:]
    rhs = btil[..., :-1] - btil[..., 1:]
    rhs[..., 0] += g[0] * P_lo
    rhs[..., -1] += g[-1] * P_hi
    flat = rhs.reshape(-1, nz).T
    p = solveh_banded(ab, flat).T.reshape(cols + (nz,))

    flux = _face_flux(p, btil, g, P_lo, P_hi)
    un = flux.mean(axis=-1)
    dnp0 = (b - un[..., None]) / Knn
    ubar = np.tensordot(K, f0, axes=1) - K[:, -1].reshape((n,) + (1,) * (n)) * dnp0[None]
    return DarcySolution(grid, K, p, ubar, dnp0, flux, un, P_hi, P_lo, b, (b_lo, b_hi))


def _face_flux(p, btil, g, P_lo, P_hi):
    ext = np.concatenate([P_lo[..., None], p, P_hi[..., None]], axis=-1)
    return btil - g * np.diff(ext, axis=-1)


@dataclass
class DarcyDiagnostics:
    flux_variation: float      # max per column of (max - min) face flux, recomputed from p0
    ubar_variation: float      # max per column of (max - min) stored ubar^n
    boundary_mismatch: float   # linear extrapolation of p0 to x_n = ±1 vs data
    scale: float
    tol: float

    @property
    def ok(self) -> bool:
        return max(self.flux_variation, self.ubar_variation) <= self.tol * self.scale

    def as_dict(self) -> dict:
        return {"flux_variation": self.flux_variation, "ubar_variation": self.ubar_variation,
                "boundary_mismatch": self.boundary_mismatch, "ok": self.ok}


def verify_darcy(sol: DarcySolution, tol: float = DARCY_TOL) -> DarcyDiagnostics:
    grid = sol.grid
    Knn = sol.K[-1, -1]
    nz, dz = grid.nz, grid.dz
    b = sol.b_nodes
    b_lo, b_hi = sol.b_bounds
    btil = np.empty(b.shape[:-1] + (nz + 1,))
    btil[..., 0] = 0.5 * (b_lo + b[..., 0])
    btil[..., -1] = 0.5 * (b[..., -1] + b_hi)
    btil[..., 1:-1] = 0.5 * (b[..., :-1] + b[..., 1:])
    g = np.full(nz + 1, Knn / dz)
    g[0] = g[-1] = 2.0 * Knn / dz
    flux = _face_flux(sol.p0, btil, g, sol.p0b_bottom, sol.p0b_top)
    fv = float(np.max(flux.max(axis=-1) - flux.min(axis=-1)))
    un = sol.ubar[-1]
    uv = float(np.max(un.max(axis=-1) - un.min(axis=-1)))
    lo = 1.5 * sol.p0[..., 0] - 0.5 * sol.p0[..., 1]
    hi = 1.5 * sol.p0[..., -1] - 0.5 * sol.p0[..., -2]
    bm = float(max(np.abs(lo - sol.p0b_bottom).max(), np.abs(hi - sol.p0b_top).max()))
    scale = max(1.0, float(np.abs(flux).max()))
    return DarcyDiagnostics(fv, uv, bm, scale, tol)

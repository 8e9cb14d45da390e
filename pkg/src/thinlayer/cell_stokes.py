"""Stokes cell problems and the permeability tensor.

For each direction i the periodic cell problem

    -Δw_i + ∇q_i = e_i in Y_f,   div w_i = 0,   w_i = 0 on Γ

is solved on the MAC grid of the unit cell.  K_ij = ∫∇w_i:∇w_j = ∫e_i·w_j.
Indices i are 1-based in the public API, matching the usual notation.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .discrete import MacSystem, ScalarField, VectorField, assemble_mac_stokes, divergence
from .errors import DimensionMismatchError, EmptyInclusionError, FormulaMismatchError
from .geometry import UnitCellGeometry
from .linsolve import CELL_TOL, SaddleSolver

FORMULA_TOL = 1e-5

_SOLVER_CACHE: dict = {}


def _cell_system(cell: UnitCellGeometry):
    key = (cell.n, cell.m, cell.fluid_mask.tobytes())
    hit = _SOLVER_CACHE.get(key)
    if hit is None:
        system = assemble_mac_stokes(cell.grid, cell.fluid_mask)
        # sparse LU fill grows badly in 3-D; inner CG is far cheaper there
        inner = "lu" if cell.n == 2 else "cg"
        solver = SaddleSolver(system.blocks, system.B, system.pressure_mass,
                              pressure_nullspace=True, inner=inner)
        if len(_SOLVER_CACHE) >= 4:
            _SOLVER_CACHE.pop(next(iter(_SOLVER_CACHE)))
        hit = _SOLVER_CACHE[key] = (system, solver)
    return hit


@dataclass
class CellStokesSolution:
    i: int
    cell: UnitCellGeometry
    system: MacSystem
    w: np.ndarray          # stacked active face values
    q: np.ndarray          # fluid-cell pressure values, mean zero
    forcing: np.ndarray    # integrated load vector M e_i
    iterations: int
    divergence_residual: float

    @property
    def velocity(self) -> VectorField:
        return self.system.velocity_field(self.w)

    @property
    def pressure(self) -> ScalarField:
        return self.system.pressure_field(self.q)

    def max_divergence(self) -> float:
        return float(np.abs(divergence(self.velocity).values).max())


def _unit_load(system: MacSystem, i: int) -> np.ndarray:
    f = np.zeros(system.n_velocity)
    d = i - 1
    f[system.offsets[d]:system.offsets[d + 1]] = system.mass[d]
    return f


def solve_stokes_cell(cell: UnitCellGeometry, i: int, tol: float = CELL_TOL,
                      max_iter: int = 2000) -> CellStokesSolution:
    """Solve the i-th periodic Stokes cell problem (i in 1..n)."""
    if not 1 <= i <= cell.n:
        raise DimensionMismatchError(f"direction {i} outside 1..{cell.n}")
    if not cell.has_inclusion:
        raise EmptyInclusionError("no solid inclusion: constant forcing has no periodic balance")
    system, solver = _cell_system(cell)
    f = _unit_load(system, i)
    res = solver.solve(f, tol=tol, max_iter=max_iter)
    return CellStokesSolution(i, cell, system, res.u, res.p, f, res.iterations,
                              res.divergence_residual)


def solve_stokes_cells(cell: UnitCellGeometry, tol: float = CELL_TOL,
                       workers: int = 1) -> list[CellStokesSolution]:
    """All n cell problems; they share one factorization."""
    idx = list(range(1, cell.n + 1))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda i: solve_stokes_cell(cell, i, tol), idx))
    return [solve_stokes_cell(cell, i, tol) for i in idx]


@dataclass
class PermeabilityTensor:
    K: np.ndarray            # energy form
    K_flux: np.ndarray       # <e_i, w_j> form
    formula_discrepancy: float
    asymmetry: float
    m: int
    inclusion: dict
    porosity: float

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.K + self.K.T))

    def as_dict(self) -> dict:
        return {"K": self.K.tolist(), "K_flux": self.K_flux.tolist(),
                "formula_discrepancy": self.formula_discrepancy,
                "asymmetry": self.asymmetry, "m": self.m, "n": self.n,
                "inclusion": self.inclusion, "porosity": self.porosity}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def permeability(solutions: Sequence[CellStokesSolution],
                 check: bool = True) -> PermeabilityTensor:
    n = len(solutions)
    cell = solutions[0].cell
    if any(s.cell is not cell and s.cell.fluid_mask.tobytes() != cell.fluid_mask.tobytes()
           for s in solutions) or sorted(s.i for s in solutions) != list(range(1, n + 1)) \
            or n != cell.n:
        raise DimensionMismatchError("need the n cell solutions of one cell")
    sols = sorted(solutions, key=lambda s: s.i)
    A = sols[0].system.A
    W = [s.w for s in sols]
    K = np.array([[W[i] @ (A @ W[j]) for j in range(n)] for i in range(n)])
    Kf = np.array([[sols[i].forcing @ W[j] for j in range(n)] for i in range(n)])
    scale = np.abs(K).max()
    disc = float(np.abs(K - Kf).max() / scale)
    asym = float(np.abs(K - K.T).max() / scale)
    if check and disc > FORMULA_TOL:
        raise FormulaMismatchError(f"energy and flux forms differ by {disc:.2e} (relative)")
    return PermeabilityTensor(K, Kf, disc, asym, cell.m, cell.inclusion.as_dict(),
                              cell.porosity)


def cell_permeability(cell: UnitCellGeometry, tol: float = CELL_TOL,
                      workers: int = 1) -> tuple[PermeabilityTensor, list]:
    sols = solve_stokes_cells(cell, tol, workers)
    return permeability(sols), sols


# two-scale reconstruction

def _periodic_sample(arr: np.ndarray, index_coords: Sequence[np.ndarray]) -> np.ndarray:
    pts = np.stack([np.asarray(c, dtype=float).ravel() for c in index_coords])
    vals = ndimage.map_coordinates(arr, pts, order=1, mode="grid-wrap")
    return vals.reshape(np.shape(index_coords[0]))


def _coefficient(spec, x):
    if callable(spec):
        return np.broadcast_to(np.asarray(spec(*x), dtype=float), np.shape(x[0]))
    return np.broadcast_to(np.asarray(spec, dtype=float), np.shape(x[0]))


class TwoScaleVelocity:
    """Sampler for u_0(x, y) and p_1(x, y).

    ``f0`` is a sequence of n callables (or constants) of x; ``dnp0`` a
    callable of x for ∂_{x_n} p_0.  Macro grid data can be wrapped with
    :func:`grid_function`.  Cell fields are interpolated multilinearly with
    periodic wrap, which is exact at the cell's own face/centre nodes.
    """

    def __init__(self, solutions: Sequence[CellStokesSolution], f0, dnp0):
        self.solutions = sorted(solutions, key=lambda s: s.i)
        self.n = len(self.solutions)
        self.f0 = list(f0)
        if len(self.f0) != self.n:
            raise DimensionMismatchError("f0 needs n components")
        self.dnp0 = dnp0
        sys0 = self.solutions[0].system
        self.m = sys0.grid.shape[0]
        self._w = [s.system.unstack(s.w) for s in self.solutions]
        q = []
        for s in self.solutions:
            a = np.zeros(s.system.grid.shape)
            a[s.system.fluid] = s.q
            q.append(a)
        self._q = q

    def coefficients(self, x) -> list[np.ndarray]:
        a = [_coefficient(self.f0[i], x) for i in range(self.n)]
        a[-1] = a[-1] - _coefficient(self.dnp0, x)
        return a

    def _y_index(self, y, d=None):
        # fractional array index; face component d sits on integer positions along d
        out = []
        for k, yk in enumerate(y):
            shift = 0.0 if k == d else 0.5
            out.append(np.asarray(yk, dtype=float) * self.m - shift)
        return out

    def cell_velocity(self, i: int, d: int, y) -> np.ndarray:
        """Component d (0-based) of w_i (1-based) at cell points y."""
        return _periodic_sample(self._w[i - 1][d], self._y_index(y, d))

    def cell_pressure(self, i: int, y) -> np.ndarray:
        return _periodic_sample(self._q[i - 1], self._y_index(y))

    def velocity(self, d: int, x, y) -> np.ndarray:
        a = self.coefficients(x)
        out = np.zeros(np.broadcast_shapes(np.shape(x[0]), np.shape(y[0])))
        for i in range(self.n):
            out = out + a[i] * self.cell_velocity(i + 1, d, y)
        return out

    def pressure_corrector(self, x, y) -> np.ndarray:
        a = self.coefficients(x)
        out = np.zeros(np.broadcast_shapes(np.shape(x[0]), np.shape(y[0])))
        for i in range(self.n):
            out = out + a[i] * self.cell_pressure(i + 1, y)
        return out

    def darcy_velocity(self, x) -> np.ndarray:
        """∫_{Y_f} u_0(x, y) dy by midpoint quadrature over the cell faces."""
        a = self.coefficients(x)
        out = []
        for d in range(self.n):
            tot = 0.0
            for i in range(self.n):
                s = self.solutions[i]
                blk = s.w[s.system.offsets[d]:s.system.offsets[d + 1]]
                tot = tot + a[i] * float(np.sum(blk * s.system.mass[d]))
            out.append(tot)
        return np.array(out)


def reconstruct_u0(solutions, f0, dnp0) -> TwoScaleVelocity:
    return TwoScaleVelocity(solutions, f0, dnp0)


def grid_function(axes: Sequence[np.ndarray], values: np.ndarray) -> Callable:
    """Multilinear interpolant of macro grid data, linearly extrapolated."""
    from scipy.interpolate import RegularGridInterpolator

    interp = RegularGridInterpolator(tuple(axes), np.asarray(values, dtype=float),
                                     method="linear", bounds_error=False, fill_value=None)

    def f(*x):
        shape = np.broadcast_shapes(*[np.shape(c) for c in x])
        pts = np.stack([np.broadcast_to(c, shape).ravel() for c in x], axis=-1)
        return interp(pts).reshape(shape)

    return f

"""Diffusion cell problems and the effective diffusion tensor D*.

Two scalings of the microscopic diffusion lead to different cell problems:

* D1 (slow horizontal diffusion, D_eps = eps^alpha D I): full-cell correctors
  -div(D(e_i + grad chi_i)) = 0 with Neumann data on Γ; only D*_nn enters
  the macro model.
* D2 (fast horizontal diffusion): horizontal correctors see only the
  horizontal gradient, so each slab y_n = const is an independent periodic
  problem; the vertical corrector reduces to the 1-D problem
  -(A (1 + chi'))' = 0 whose solution gives D*_nn = D * harmonic mean of A.

Discretisation is cell-centred finite volumes on the fluid cells with the
fluxes through solid faces dropped.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .discrete import fv_pairs, fv_stiffness
from .errors import (DisconnectedSlabWarning, NonpositiveProfileError,
                     StructureViolationError)
from .geometry import AreaProfile, UnitCellGeometry, area_profile, periodic_labels
from .linsolve import CELL_TOL, ComponentNullspace, solve_spd

ENERGY_FLUX_TOL = 1e-5
STRUCTURE_TOL = 1e-8


@dataclass(frozen=True)
class DiffusionCase:
    kind: str   # "D1" or "D2"
    D: float = 1.0

    def __post_init__(self):
        if self.kind not in ("D1", "D2"):
            raise ValueError(f"unknown diffusion case {self.kind!r}")
        if not self.D > 0:
            raise ValueError("diffusion coefficient must be positive")

    def micro_coefficients(self, eps_alpha: float, n: int) -> np.ndarray:
        """Diagonal of the microscopic diffusion matrix D_eps."""
        if self.kind == "D1":
            return np.full(n, eps_alpha * self.D)
        c = np.full(n, self.D / eps_alpha)
        c[-1] = self.D * eps_alpha
        return c


@dataclass
class CellCorrector:
    """Corrector values on the full cell grid (zero on solid cells)."""

    direction: int         # 1-based
    values: np.ndarray
    axes: tuple            # gradient directions that enter the problem
    residual: float
    iterations: int


@dataclass
class VerticalProfile:
    """Vertical corrector chi_n(y_n) of case D2 at the slab faces y = k/m."""

    A: np.ndarray
    c: float
    chi: np.ndarray
    chi_fd: np.ndarray
    D_nn_fd: float

    @property
    def m(self) -> int:
        return self.A.size

    @property
    def derivative(self) -> np.ndarray:
        """1 + chi' per slab (closed form c/A)."""
        return self.c / self.A

    @property
    def fd_discrepancy(self) -> float:
        return float(np.abs(self.chi - self.chi_fd).max())

    def sample(self, yn) -> np.ndarray:
        # chi is piecewise linear between faces
        m = self.m
        s = np.mod(np.asarray(yn, dtype=float), 1.0) * m
        k = np.minimum(np.floor(s).astype(int), m - 1)
        t = s - k
        return (1 - t) * self.chi[k] + t * self.chi[(k + 1) % m]


@dataclass
class CellDiffusionSolutions:
    cell: UnitCellGeometry
    case: DiffusionCase
    horizontal: list
    vertical: object       # CellCorrector (D1) or VerticalProfile (D2)
    disconnected_slabs: list = field(default_factory=list)


def _direction_rhs(cell, axis, D):
    """Integrated -∫ D e_axis · grad psi for the FV test basis."""
    grid = cell.grid
    lo, hi = fv_pairs(grid, cell.fluid_mask, axis)
    w = D * grid.cell_volume / grid.spacing[axis]
    b = np.zeros(int(cell.fluid_mask.sum()))
    np.add.at(b, lo, w)
    np.add.at(b, hi, -w)
    return b


def _scatter(cell, x):
    out = np.zeros(cell.fluid_mask.shape)
    out[cell.fluid_mask] = x
    return out


def _slab_labels(cell):
    """Component labels of every horizontal slab's fluid set, flagged if split."""
    n = cell.n
    labels = np.zeros(cell.fluid_mask.shape, dtype=np.int64)
    split, offset = [], 0
    for k in range(cell.m):
        lab, ncomp = periodic_labels(cell.fluid_mask[..., k], range(n - 1))
        if ncomp > 1:
            split.append(k)
        lab = np.where(lab > 0, lab + offset, 0)
        labels[..., k] = lab
        offset += ncomp
    return labels[cell.fluid_mask], split


def solve_horizontal_cell(cell: UnitCellGeometry, D: float, i: int,
                          tol: float = CELL_TOL, _labels=None) -> CellCorrector:
    """Horizontal corrector chi_i (case D2), independent per slab.

    The stencil has no vertical coupling; each connected slab component
    gets its own mean-zero normalisation.
    """
    if not 1 <= i <= cell.n - 1:
        raise ValueError(f"horizontal direction {i} outside 1..{cell.n - 1}")
    if _labels is None:
        labels, split = _slab_labels(cell)
        if split:
            warnings.warn(f"slabs {split} have disconnected fluid sections; "
                          "each part is normalised separately", DisconnectedSlabWarning)
    else:
        labels = _labels
    axes = tuple(range(cell.n - 1))
    L = fv_stiffness(cell.grid, cell.fluid_mask, D, axes=axes)
    b = _direction_rhs(cell, i - 1, D)
    res = solve_spd(L, b, tol=tol, nullspace=ComponentNullspace(labels))
    return CellCorrector(i, _scatter(cell, res.x), axes, res.residual, res.iterations)


def solve_vertical_cell_full(cell: UnitCellGeometry, D: float, tol: float = CELL_TOL,
                             direction: Optional[int] = None) -> CellCorrector:
    """Full-cell corrector for direction e_n (or ``direction``), case D1."""
    i = cell.n if direction is None else direction
    L = fv_stiffness(cell.grid, cell.fluid_mask, D)
    b = _direction_rhs(cell, i - 1, D)
    res = solve_spd(L, b, tol=tol, nullspace="constants")
    return CellCorrector(i, _scatter(cell, res.x), tuple(range(cell.n)), res.residual,
                         res.iterations)


def solve_vertical_cell_1d(profile, D: float = 1.0) -> VerticalProfile:
    """1-D periodic corrector -(A(1 + chi'))' = 0, closed form plus FD check."""
    A = np.asarray(profile.values if isinstance(profile, AreaProfile) else profile, dtype=float)
    if A.ndim != 1 or A.size < 1 or np.any(~np.isfinite(A)) or A.min() <= 0:
        raise NonpositiveProfileError("area profile must be positive")
    m = A.size
    h = 1.0 / m
    c = 1.0 / np.mean(1.0 / A)
    # closed form: chi' = c/A - 1, integrated from face 0
    chi = np.concatenate([[0.0], np.cumsum(h * (c / A - 1.0))[:-1]])
    chi -= chi.mean()

    # finite differences with chi on faces, A on slabs: flux_k = A_k(1 + (chi_{k+1}-chi_k)/h)
    k = np.arange(m)
    kp = (k + 1) % m
    w = A / h
    rows = np.concatenate([k, kp, k, kp])
    cols = np.concatenate([k, kp, kp, k])
    vals = np.concatenate([w, w, -w, -w])
    L = sp.coo_matrix((vals, (rows, cols)), shape=(m, m)).tocsr()
    b = np.zeros(m)
    np.add.at(b, k, A)
    np.add.at(b, kp, -A)
    # small dense singular system: the minimum-norm solution is the mean-zero one
    chi_fd = np.linalg.lstsq(L.toarray(), b, rcond=None)[0]
    chi_fd -= chi_fd.mean()
    grad = 1.0 + (chi_fd[kp] - chi_fd) / h
    D_fd = float(D * np.sum(h * A * grad ** 2))
    return VerticalProfile(A=A, c=float(c), chi=chi, chi_fd=chi_fd, D_nn_fd=D_fd)


@dataclass
class EffectiveDiffusion:
    case: str
    D: float
    Dstar: np.ndarray
    Dstar_flux: np.ndarray
    energy_flux_discrepancy: float
    porosity: float
    residuals: dict

    @property
    def n(self) -> int:
        return self.Dstar.shape[0]

    @property
    def D_nn(self) -> float:
        return float(self.Dstar[-1, -1])

    def as_dict(self) -> dict:
        return {"case": self.case, "D": self.D, "Dstar": self.Dstar.tolist(),
                "Dstar_flux": self.Dstar_flux.tolist(),
                "energy_flux_discrepancy": self.energy_flux_discrepancy,
                "porosity": self.porosity, "residuals": self.residuals}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def solve_cell_diffusion(cell: UnitCellGeometry, case: DiffusionCase,
                         tol: float = CELL_TOL) -> CellDiffusionSolutions:
    n = cell.n
    if case.kind == "D2":
        labels, split = _slab_labels(cell)
        if split:
            warnings.warn(f"slabs {split} have disconnected fluid sections; "
                          "each part is normalised separately", DisconnectedSlabWarning)
        hor = [solve_horizontal_cell(cell, case.D, i, tol, _labels=labels)
               for i in range(1, n)]
        ver = solve_vertical_cell_1d(area_profile(cell), case.D)
        return CellDiffusionSolutions(cell, case, hor, ver, split)
    hor = [solve_vertical_cell_full(cell, case.D, tol, direction=i) for i in range(1, n)]
    ver = solve_vertical_cell_full(cell, case.D, tol)
    return CellDiffusionSolutions(cell, case, hor, ver, [])


def _face_gradients(cell, corr: CellCorrector):
    """Per axis: (pair weights D*vol, e_i + grad chi component) over fluid pairs."""
    grid = cell.grid
    x = corr.values[cell.fluid_mask]
    out = {}
    for a in corr.axes:
        lo, hi = fv_pairs(grid, cell.fluid_mask, a)
        g = (x[hi] - x[lo]) / grid.spacing[a] + (1.0 if a == corr.direction - 1 else 0.0)
        out[a] = g
    return out


def _tensor_block(cell, D, correctors):
    """Energy and flux forms over the directions carried by ``correctors``."""
    vol = cell.grid.cell_volume
    grads = [_face_gradients(cell, c) for c in correctors]
    k = len(correctors)
    E = np.zeros((k, k))
    F = np.zeros((k, k))
    for p in range(k):
        for q in range(k):
            E[p, q] = sum(D * vol * float(np.sum(grads[p][a] * grads[q][a]))
                          for a in correctors[p].axes)
            aq = correctors[q].direction - 1
            F[p, q] = D * vol * float(np.sum(grads[p][aq])) if aq in grads[p] else 0.0
    return E, F


def effective_diffusion(case: DiffusionCase, solutions: CellDiffusionSolutions,
                        D: Optional[float] = None, check: bool = True) -> EffectiveDiffusion:
    """Assemble D* by midpoint quadrature, energy and flux forms."""
    D = case.D if D is None else D
    cell = solutions.cell
    n = cell.n
    Ds = np.zeros((n, n))
    Df = np.zeros((n, n))
    res = {f"chi_{c.direction}": c.residual for c in solutions.horizontal}
    if case.kind == "D2":
        if solutions.horizontal:
            E, F = _tensor_block(cell, D, solutions.horizontal)
            Ds[:n - 1, :n - 1] = E
            Df[:n - 1, :n - 1] = F
        prof = solutions.vertical
        # closed form collapses to D*c; FD energy is the independent route
        Ds[-1, -1] = D * prof.c
        Df[-1, -1] = prof.D_nn_fd
        res[f"chi_{n}"] = prof.fd_discrepancy
        cross = 0.0   # horizontal correctors carry no e_n gradient
    else:
        corr = list(solutions.horizontal) + [solutions.vertical]
        E, F = _tensor_block(cell, D, corr)
        Ds[:] = E
        Df[:] = F
        res[f"chi_{n}"] = solutions.vertical.residual
        cross = float(np.abs(E[-1, :-1]).max()) if n > 1 else 0.0
    scale = max(float(np.abs(Ds).max()), np.finfo(float).tiny)
    disc = float(np.abs(Ds - Df).max() / scale)
    if check:
        if cross > STRUCTURE_TOL * scale:
            raise StructureViolationError(f"vertical cross terms {cross:.2e} do not vanish")
        hb = Ds[:n - 1, :n - 1]
        if np.abs(hb - hb.T).max() > STRUCTURE_TOL * scale:
            raise StructureViolationError("horizontal block of D* is not symmetric")
        if disc > ENERGY_FLUX_TOL:
            raise StructureViolationError(f"energy and flux forms differ by {disc:.2e}")
    Ds[:n - 1, -1] = Ds[-1, :n - 1] = 0.0
    Df[:n - 1, -1] = Df[-1, :n - 1] = 0.0
    return EffectiveDiffusion(case.kind, float(D), Ds, Df, disc, cell.porosity, res)


def cell_effective_diffusion(cell: UnitCellGeometry, case: DiffusionCase,
                             tol: float = CELL_TOL):
    sols = solve_cell_diffusion(cell, case, tol)
    return effective_diffusion(case, sols), sols

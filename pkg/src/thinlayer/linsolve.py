"""Sparse SPD and saddle-point solvers.

``solve_spd`` is Jacobi-preconditioned conjugate gradients with explicit
projection onto the complement of a known nullspace.  ``SaddleSolver``
performs Uzawa iterations as conjugate gradients on the pressure Schur
complement ``B A^{-1} B^T``, preconditioned by the inverse pressure mass
matrix; ``A^{-1}`` is applied through sparse LU factors of its diagonal
blocks (or, optionally, inner CG solves).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatchError, IncompatibleRHSError, NoConvergenceError

CELL_TOL = 1e-10
MICRO_TOL = 1e-8


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    residual: float  # relative to ||b||
    converged: bool
    history: list = field(default_factory=list, repr=False)


class ComponentNullspace:
    """Piecewise constants on disjoint index sets given by integer labels.

    Projection is a per-label mean subtraction, so many components (one per
    slab, say) cost no more than a single constant mode.
    """

    def __init__(self, labels):
        labels = np.asarray(labels)
        _, self.labels = np.unique(labels, return_inverse=True)
        self.labels = self.labels.ravel()
        self.counts = np.bincount(self.labels).astype(float)

    def project(self, v):
        means = np.bincount(self.labels, weights=v) / self.counts
        return v - means[self.labels]


def _nullspace_basis(null, size: int):
    if isinstance(null, ComponentNullspace):
        if null.labels.size != size:
            raise DimensionMismatchError("nullspace labels do not match the system size")
        return null
    if null is None:
        return None
    if isinstance(null, str):
        if null != "constants":
            raise ValueError(f"unknown nullspace {null!r}")
        return np.full((size, 1), 1.0 / np.sqrt(size))
    Z = np.atleast_2d(np.asarray(null, dtype=float))
    if Z.shape[0] != size:
        Z = Z.T
    if Z.shape[0] != size:
        raise DimensionMismatchError("nullspace vectors do not match the system size")
    q, _ = np.linalg.qr(Z)
    return q


def _projector(Z):
    if Z is None:
        return lambda v: v
    if isinstance(Z, ComponentNullspace):
        return Z.project
    return lambda v: v - Z @ (Z.T @ v)


def solve_spd(A, b, tol: float = CELL_TOL, max_iter: Optional[int] = None,
              x0=None, nullspace=None, raise_on_failure: bool = True) -> SolveResult:
    """Preconditioned CG for symmetric positive (semi-)definite ``A``.

    ``nullspace`` is ``None``, ``"constants"``, a :class:`ComponentNullspace`
    or an array of basis vectors;
    the right-hand side and all iterates are projected onto its orthogonal
    complement, so the returned solution has no nullspace component.
    """
    A = sp.csr_matrix(A) if not sp.issparse(A) else A.tocsr()
    b = np.asarray(b, dtype=float)
    N = A.shape[0]
    if A.shape != (N, N) or b.shape != (N,):
        raise DimensionMismatchError(f"A {A.shape} incompatible with b {b.shape}")
    Z = _nullspace_basis(nullspace, N)
    proj = _projector(Z)
    b = proj(b)
    bnorm = np.linalg.norm(b)
    max_iter = max_iter or 10 * N
    if bnorm == 0.0:
        return SolveResult(np.zeros(N), 0, 0.0, True, [0.0])
    diag = A.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    x = np.zeros(N) if x0 is None else proj(np.asarray(x0, dtype=float).copy())
    r = b - A @ x
    r = proj(r)
    z = proj(inv_diag * r)
    d = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    best_x, best_res = x.copy(), history[0]
    k = 0
    while history[-1] > tol and k < max_iter:
        Ad = A @ d
        dAd = d @ Ad
        if dAd <= 0:
            break
        step = rz / dAd
        x += step * d
        r -= step * Ad
        r = proj(r)
        z = proj(inv_diag * r)
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
        k += 1
        history.append(np.linalg.norm(r) / bnorm)
        if history[-1] < best_res:
            best_x, best_res = x.copy(), history[-1]
    x = proj(x)
    true_res = np.linalg.norm(proj(b - A @ x)) / bnorm
    result = SolveResult(x, k, true_res, true_res <= max(tol, 10 * np.finfo(float).eps * 10),
                         history)
    if not result.converged:
        result = SolveResult(proj(best_x), k, best_res, False, history)
        if raise_on_failure:
            raise NoConvergenceError(f"CG stopped after {k} iterations at residual {best_res:.3e}",
                                     result)
    return result


class BlockInverse:
    """Apply ``A^{-1}`` for block-diagonal SPD ``A`` via per-block sparse LU."""

    def __init__(self, blocks: Sequence, method: str = "lu", inner_tol: float = 1e-12):
        self.sizes = [blk.shape[0] for blk in blocks]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.method = method
        self.inner_tol = inner_tol
        self.blocks = [blk.tocsr() for blk in blocks]
        if method == "lu":
            self.factors = [spla.splu(blk.tocsc(), permc_spec="MMD_AT_PLUS_A",
                                     options={"SymmetricMode": True}) if blk.shape[0] else None
                            for blk in blocks]
        elif method != "cg":
            raise ValueError(f"unknown inner method {method!r}")

    @property
    def shape(self):
        n = int(self.offsets[-1])
        return (n, n)

    def __call__(self, rhs: np.ndarray) -> np.ndarray:
        out = np.empty_like(rhs, dtype=float)
        for k, blk in enumerate(self.blocks):
            a, b = self.offsets[k], self.offsets[k + 1]
            if a == b:
                continue
            if self.method == "lu":
                out[a:b] = self.factors[k].solve(rhs[a:b])
            else:
                out[a:b] = solve_spd(blk, rhs[a:b], tol=self.inner_tol).x
        return out


@dataclass
class SaddleResult:
    u: np.ndarray
    p: np.ndarray
    iterations: int
    divergence_residual: float   # ||B u - g|| relative to the initial Schur residual
    momentum_residual: float     # ||A u + B^T p - f|| / ||f||
    converged: bool
    history: list = field(default_factory=list, repr=False)


class SaddleSolver:
    """Solve ``[[A, B^T], [B, 0]] (u, p) = (f, g)`` by Schur-complement CG.

    ``A`` is given as a list of diagonal blocks (a single matrix is accepted
    as one block).  With ``pressure_nullspace`` the pressure is determined
    up to constants and returned with zero weighted mean.
    """

    def __init__(self, A_blocks, B, pressure_mass=None, pressure_nullspace: bool = False,
                 inner: str = "lu"):
        if sp.issparse(A_blocks):
            A_blocks = [A_blocks]
        self.blocks = list(A_blocks)
        self.B = sp.csr_matrix(B)
        self.Ainv = BlockInverse(self.blocks, inner)
        nu = self.Ainv.shape[0]
        if self.B.shape[1] != nu:
            raise DimensionMismatchError(f"B {self.B.shape} does not match A ({nu})")
        npr = self.B.shape[0]
        self.mass = (np.ones(npr) if pressure_mass is None
                     else np.asarray(pressure_mass, dtype=float))
        self.pressure_nullspace = pressure_nullspace
        self._A = sp.block_diag(self.blocks, format="csr")

    def _project(self, v):
        if not self.pressure_nullspace:
            return v
        return v - v.mean()

    def solve(self, f, g=None, tol: float = CELL_TOL, max_iter: int = 2000,
              raise_on_failure: bool = True, p0=None) -> SaddleResult:
        """``p0`` is an optional initial pressure; the stopping test stays
        relative to the cold-start Schur residual."""
        B = self.B
        f = np.asarray(f, dtype=float)
        npr = B.shape[0]
        g = np.zeros(npr) if g is None else np.asarray(g, dtype=float)
        if f.shape != (B.shape[1],) or g.shape != (npr,):
            raise DimensionMismatchError("right-hand side sizes do not match the system")
        if self.pressure_nullspace:
            # B^T 1 = 0, so the divergence data must have zero sum
            if abs(g.sum()) > 1e-10 * max(1.0, np.abs(g).sum()):
                raise IncompatibleRHSError("divergence data not orthogonal to constants")
        u_f = self.Ainv(f)
        rhs = self._project(B @ u_f - g)
        ref = np.linalg.norm(rhs)
        p = np.zeros(npr) if p0 is None else self._project(np.array(p0, dtype=float))
        r = rhs if p0 is None else rhs - self._project(B @ self.Ainv(B.T @ p))
        history = [np.linalg.norm(r) / ref if ref > 0 else 0.0]
        k = 0
        if history[-1] > 0:
            r = r.copy()
            z = self._project(r / self.mass)
            d = z.copy()
            rz = r @ z
            while history[-1] > tol and k < max_iter:
                Sd = self._project(B @ self.Ainv(B.T @ d))
                step = rz / (d @ Sd)
                p += step * d
                r -= step * Sd
                z = self._project(r / self.mass)
                rz_new = r @ z
                d = z + (rz_new / rz) * d
                rz = rz_new
                k += 1
                history.append(np.linalg.norm(r) / ref)
        if self.pressure_nullspace:
            p -= np.sum(self.mass * p) / np.sum(self.mass)
        u = u_f - self.Ainv(B.T @ p)
        div_abs = np.linalg.norm(B @ u - g)
        div_rel = div_abs / ref if ref > 0 else div_abs
        fn = np.linalg.norm(f)
        mom = np.linalg.norm(self._A @ u + B.T @ p - f)
        mom_rel = mom / fn if fn > 0 else mom
        converged = div_rel <= max(tol, 1e-13) * 10 or history[-1] <= tol
        result = SaddleResult(u, p, k, div_rel, mom_rel, converged, history)
        if not converged and raise_on_failure:
            raise NoConvergenceError(
                f"Schur CG stopped after {k} iterations at residual {history[-1]:.3e}", result)
        return result


def solve_saddle(A, B, f, g=None, tol: float = CELL_TOL, pressure_mass=None,
                 pressure_nullspace: bool = False, inner: str = "lu",
                 max_iter: int = 2000) -> SaddleResult:
    """One-shot wrapper around :class:`SaddleSolver`."""
    solver = SaddleSolver(A, B, pressure_mass=pressure_mass,
                          pressure_nullspace=pressure_nullspace, inner=inner)
    return solver.solve(f, g, tol=tol, max_iter=max_iter)

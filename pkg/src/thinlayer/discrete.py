"""Structured grids, masked fields and MAC operators.

Array layout
------------
All arrays are indexed ``[i_1, ..., i_n]`` in C order; the last axis is the
vertical direction ``x_n``.  Scalar fields live at cell centres.  Component
``d`` of a vector field lives on the faces normal to axis ``d``: along that
axis there are ``N_d + 1`` faces for a bounded axis and ``N_d`` faces for a
periodic one, face ``k`` being the lower face of cell ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import GridMismatchError

PERIODIC = "periodic"
WALL = "wall"          # no-slip: normal faces removed, tangential partner = 0
TRACTION = "traction"  # natural (pressure) boundary: normal faces kept


@dataclass(frozen=True)
class StructuredGrid:
    shape: tuple[int, ...]
    spacing: tuple[float, ...]
    periodic: tuple[bool, ...]
    origin: tuple[float, ...] = None
    extents: tuple[Fraction, ...] = None

    def __post_init__(self):
        n = len(self.shape)
        if len(self.spacing) != n or len(self.periodic) != n:
            raise GridMismatchError("shape, spacing and periodic flags differ in length")
        if self.origin is None:
            object.__setattr__(self, "origin", (0.0,) * n)
        if self.extents is None:
            ext = tuple(Fraction(s).limit_denominator(10**12) * c
                        for s, c in zip(self.spacing, self.shape))
            object.__setattr__(self, "extents", ext)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def face_shape(self, d: int) -> tuple[int, ...]:
        s = list(self.shape)
        if not self.periodic[d]:
            s[d] += 1
        return tuple(s)

    def cell_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.shape[axis]) + 0.5) * self.spacing[axis]

    def face_positions(self, axis: int) -> np.ndarray:
        k = np.arange(self.face_shape(axis)[axis])
        return self.origin[axis] + k * self.spacing[axis]

    def cell_coordinates(self) -> list[np.ndarray]:
        return np.meshgrid(*[self.cell_centers(a) for a in range(self.dim)], indexing="ij")

    def face_coordinates(self, d: int) -> list[np.ndarray]:
        axes = [self.face_positions(a) if a == d else self.cell_centers(a)
                for a in range(self.dim)]
        return np.meshgrid(*axes, indexing="ij")

    def same_as(self, other: "StructuredGrid") -> bool:
        return (self.shape == other.shape and self.periodic == other.periodic
                and np.allclose(self.spacing, other.spacing))


@dataclass
class ScalarField:
    grid: StructuredGrid
    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise GridMismatchError(f"values {self.values.shape} vs grid {self.grid.shape}")
        if self.mask is None:
            self.mask = np.ones(self.grid.shape, dtype=bool)
        self.values = np.where(self.mask, self.values, 0.0)


@dataclass
class VectorField:
    grid: StructuredGrid
    components: list
    masks: list = None

    def __post_init__(self):
        g = self.grid
        if len(self.components) != g.dim:
            raise GridMismatchError("one component per axis required")
        comps = []
        for d, c in enumerate(self.components):
            c = np.asarray(c, dtype=float)
            if c.shape != g.face_shape(d):
                raise GridMismatchError(f"component {d}: {c.shape} vs faces {g.face_shape(d)}")
            comps.append(c)
        if self.masks is None:
            self.masks = [np.ones(g.face_shape(d), dtype=bool) for d in range(g.dim)]
        self.components = [np.where(m, c, 0.0) for c, m in zip(comps, self.masks)]

    @classmethod
    def from_function(cls, grid, func, masks=None):
        """Sample ``func(*coords) -> sequence of components`` on the faces."""
        comps = []
        for d in range(grid.dim):
            coords = grid.face_coordinates(d)
            comps.append(np.broadcast_to(np.asarray(func(*coords)[d], dtype=float),
                                         coords[0].shape).copy())
        return cls(grid, comps, masks)


def _shift(a: np.ndarray, axis: int, periodic: bool):
    """Return (lower, upper) views so that ``upper - lower`` is a forward difference."""
    if periodic:
        return a, np.roll(a, -1, axis=axis)
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    return a[tuple(lo)], a[tuple(hi)]


def divergence(v: VectorField) -> ScalarField:
    g = v.grid
    out = np.zeros(g.shape)
    for d in range(g.dim):
        lo, hi = _shift(v.components[d], d, g.periodic[d])
        out += (hi - lo) / g.spacing[d]
    return ScalarField(g, out)


def gradient(p: ScalarField) -> VectorField:
    """Face-centred differences between active cells; zero on bounded-axis boundary faces."""
    g = p.grid
    comps, masks = [], []
    for d in range(g.dim):
        vals = p.values
        act = p.mask
        if g.periodic[d]:
            diff = (vals - np.roll(vals, 1, axis=d)) / g.spacing[d]
            m = act & np.roll(act, 1, axis=d)
        else:
            shape = g.face_shape(d)
            diff = np.zeros(shape)
            m = np.zeros(shape, dtype=bool)
            inner = [slice(None)] * g.dim
            inner[d] = slice(1, -1)
            lo, hi = _shift(vals, d, False)
            alo, ahi = _shift(act, d, False)
            diff[tuple(inner)] = (hi - lo) / g.spacing[d]
            m[tuple(inner)] = alo & ahi
        comps.append(np.where(m, diff, 0.0))
        masks.append(m)
    return VectorField(g, comps, masks)


def inner_cells(a: ScalarField, b: ScalarField) -> float:
    return float(np.sum(a.values * b.values) * a.grid.cell_volume)


def inner_faces(u: VectorField, v: VectorField) -> float:
    return float(sum(np.sum(x * y) for x, y in zip(u.components, v.components))
                 * u.grid.cell_volume)


# ---------------------------------------------------------------------------
# norms


@dataclass
class NormRecord:
    l2: float
    grad: float
    grad_h: float
    grad_n: float
    linf: float
    exponents: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"l2": self.l2, "grad": self.grad, "grad_h": self.grad_h,
                "grad_n": self.grad_n, "linf": self.linf, "exponents": dict(self.exponents)}


def _pair_sq_sums(arr, active, grid, skip_axis_bounds=True):
    """Sum of squared forward differences per axis.

    Pairs whose members are both inactive contribute zero automatically; pairs
    through a bounded domain side have no partner and are skipped.
    """
    sums = []
    for e in range(grid.dim):
        lo, hi = _shift(arr, e, grid.periodic[e] and arr.shape[e] == grid.shape[e])
        alo, ahi = _shift(active, e, grid.periodic[e] and arr.shape[e] == grid.shape[e])
        use = alo | ahi
        sums.append(float(np.sum(np.where(use, (hi - lo) ** 2, 0.0))) / grid.spacing[e] ** 2)
    return sums


def weighted_norms(f, layer=None, weights: dict | None = None) -> NormRecord:
    """L2 / gradient / sup norms of a field, each multiplied by ``eps**beta``.

    ``weights`` maps a norm name (``l2``, ``grad``, ``grad_h``, ``grad_n``,
    ``linf``) to the exponent ``beta``; ``layer`` supplies ``eps`` (defaults
    to 1 when absent).
    """
    weights = dict(weights or {})
    eps = float(layer.eps) if layer is not None else 1.0
    g = f.grid
    vol = g.cell_volume
    if isinstance(f, ScalarField):
        l2sq = float(np.sum(f.values[f.mask] ** 2)) * vol
        # differences only between active neighbours: Neumann at solid walls
        per_axis = []
        for e in range(g.dim):
            lo, hi = _shift(f.values, e, g.periodic[e])
            alo, ahi = _shift(f.mask, e, g.periodic[e])
            per_axis.append(float(np.sum(np.where(alo & ahi, (hi - lo) ** 2, 0.0)))
                            / g.spacing[e] ** 2)
        linf = float(np.max(np.abs(f.values[f.mask]))) if f.mask.any() else 0.0
    else:
        l2sq = sum(float(np.sum(c ** 2)) for c in f.components) * vol
        per_axis = [0.0] * g.dim
        for c, m in zip(f.components, f.masks):
            for e, s in enumerate(_pair_sq_sums(c, m, g)):
                per_axis[e] += s
        linf = max(float(np.max(np.abs(c))) if c.size else 0.0 for c in f.components)
    gh = sum(per_axis[:-1]) * vol
    gn = per_axis[-1] * vol
    raw = {"l2": np.sqrt(l2sq), "grad": np.sqrt(gh + gn), "grad_h": np.sqrt(gh),
           "grad_n": np.sqrt(gn), "linf": linf}
    scaled = {k: v * eps ** weights.get(k, 0.0) for k, v in raw.items()}
    return NormRecord(exponents=weights, **scaled)


# ---------------------------------------------------------------------------
# MAC Stokes assembly


@dataclass
class MacSystem:
    """Assembled MAC discretisation of ``a(u, phi) - (p, div phi)``.

    Everything is in integrated (weak) form: ``blocks[d]`` is the stiffness of
    component ``d``, ``mass[d]`` the diagonal face weights, ``B`` the
    integrated divergence acting on the stacked active face unknowns.
    """

    grid: StructuredGrid
    fluid: np.ndarray
    bc: tuple
    face_masks: list
    face_index: list
    offsets: list
    blocks: list
    mass: list
    B: sp.csr_matrix
    cell_index: np.ndarray
    traction_faces: list  # (component, flat active index, sign) triples per side
    pressure_nullspace: bool

    @property
    def n_velocity(self) -> int:
        return self.offsets[-1]

    @property
    def n_pressure(self) -> int:
        return self.B.shape[0]

    @property
    def A(self) -> sp.csr_matrix:
        return sp.block_diag(self.blocks, format="csr")

    @property
    def mass_vector(self) -> np.ndarray:
        return np.concatenate(self.mass)

    @property
    def pressure_mass(self) -> np.ndarray:
        return np.full(self.n_pressure, self.grid.cell_volume)

    def stack(self, arrays: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([a[m] for a, m in zip(arrays, self.face_masks)])

    def unstack(self, x: np.ndarray) -> list[np.ndarray]:
        out = []
        for d, m in enumerate(self.face_masks):
            a = np.zeros(m.shape)
            a[m] = x[self.offsets[d]:self.offsets[d + 1]]
            out.append(a)
        return out

    def velocity_field(self, x: np.ndarray) -> VectorField:
        return VectorField(self.grid, self.unstack(x), [m.copy() for m in self.face_masks])

    def pressure_field(self, p: np.ndarray) -> ScalarField:
        vals = np.zeros(self.grid.shape)
        vals[self.fluid] = p
        return ScalarField(self.grid, vals, self.fluid.copy())

    def sample_faces(self, func) -> np.ndarray:
        """Stack ``func(*coords)[d]`` over active faces of every component."""
        parts = []
        for d in range(self.grid.dim):
            coords = self.grid.face_coordinates(d)
            vals = np.broadcast_to(np.asarray(func(*coords)[d], dtype=float), coords[0].shape)
            parts.append(vals[self.face_masks[d]])
        return np.concatenate(parts)


def _normalise_bc(grid, bc):
    if bc is None:
        bc = [(PERIODIC, PERIODIC) if p else (WALL, WALL) for p in grid.periodic]
    bc = tuple(tuple(b) for b in bc)
    for d, (lo, hi) in enumerate(bc):
        if (lo == PERIODIC) != (hi == PERIODIC) or (lo == PERIODIC) != grid.periodic[d]:
            raise GridMismatchError(f"axis {d}: periodic flags and boundary conditions disagree")
    return bc


def face_activity(grid: StructuredGrid, fluid: np.ndarray, bc) -> list[np.ndarray]:
    """Active (unknown) faces per component for the MAC velocity."""
    bc = _normalise_bc(grid, bc)
    masks = []
    for d in range(grid.dim):
        if grid.periodic[d]:
            m = fluid & np.roll(fluid, 1, axis=d)
        else:
            m = np.zeros(grid.face_shape(d), dtype=bool)
            inner = [slice(None)] * grid.dim
            inner[d] = slice(1, -1)
            lo, hi = _shift(fluid, d, False)
            m[tuple(inner)] = lo & hi
            for side, k, cell in ((0, 0, 0), (1, grid.shape[d], grid.shape[d] - 1)):
                if bc[d][side] == TRACTION:
                    fi = [slice(None)] * grid.dim
                    ci = [slice(None)] * grid.dim
                    fi[d] = k
                    ci[d] = cell
                    m[tuple(fi)] = fluid[tuple(ci)]
        masks.append(m)
    return masks


def assemble_mac_stokes(grid: StructuredGrid, fluid: np.ndarray, bc=None) -> MacSystem:
    """Assemble the masked MAC Stokes operator on ``grid``.

    ``fluid`` is the boolean cell mask; faces touching a solid cell carry a
    homogeneous Dirichlet value (no ghost reflection), as do faces on
    ``wall`` sides.  ``traction`` sides keep their normal faces as unknowns
    with half control volumes.
    """
    bc = _normalise_bc(grid, bc)
    n = grid.dim
    h = grid.spacing
    vol = grid.cell_volume
    fluid = np.asarray(fluid, dtype=bool)
    masks = face_activity(grid, fluid, bc)

    face_index, offsets = [], [0]
    for m in masks:
        idx = np.full(m.shape, -1, dtype=np.int64)
        idx[m] = np.arange(int(m.sum()))
        face_index.append(idx)
        offsets.append(offsets[-1] + int(m.sum()))

    blocks, mass = [], []
    for d in range(n):
        m = masks[d]
        idx = face_index[d]
        fshape = m.shape
        half = np.ones(fshape)
        if not grid.periodic[d]:
            for side, k in ((0, 0), (1, grid.shape[d])):
                if bc[d][side] == TRACTION:
                    sl = [slice(None)] * n
                    sl[d] = k
                    half[tuple(sl)] = 0.5
        rows, cols, vals = [], [], []
        diag = np.zeros(fshape)
        for e in range(n):
            w_e = vol / h[e] ** 2
            wrap = grid.periodic[e]
            lo_i, hi_i = _shift(idx, e, wrap)
            lo_m, hi_m = _shift(m, e, wrap)
            if e == d:
                w = np.full(lo_i.shape, w_e)
            else:
                lo_h, _ = _shift(half, e, wrap)
                w = w_e * lo_h
            both = lo_m & hi_m
            rows += [lo_i[both], hi_i[both]]
            cols += [hi_i[both], lo_i[both]]
            vals += [-w[both], -w[both]]
            # diagonal contributions, including pairs with an inactive partner
            dl = np.zeros(fshape)
            sl_lo = [slice(None)] * n
            sl_hi = [slice(None)] * n
            if wrap:
                dl += np.where(lo_m, w, 0.0)
                dl += np.roll(np.where(hi_m, w, 0.0), 1, axis=e)
            else:
                sl_lo[e] = slice(0, -1)
                sl_hi[e] = slice(1, None)
                dl[tuple(sl_lo)] += np.where(lo_m, w, 0.0)
                dl[tuple(sl_hi)] += np.where(hi_m, w, 0.0)
                if e != d:
                    # partner outside the domain along a bounded tangential axis
                    for side, k in ((0, 0), (1, grid.shape[e] - 1)):
                        if bc[e][side] == WALL:
                            sl = [slice(None)] * n
                            sl[e] = k
                            dl[tuple(sl)] += w_e * half[tuple(sl)]
            diag += dl
        act = m
        rows.append(idx[act])
        cols.append(idx[act])
        vals.append(diag[act])
        nd = int(act.sum())
        Ad = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(nd, nd)).tocsr()
        Ad.sum_duplicates()
        blocks.append(Ad)
        mass.append(vol * half[act])

    cell_index = np.full(grid.shape, -1, dtype=np.int64)
    cell_index[fluid] = np.arange(int(fluid.sum()))
    rows, cols, vals = [], [], []
    for d in range(n):
        idx = face_index[d]
        coef = vol / h[d]
        nc = grid.shape[d]
        low = [slice(None)] * n
        high = [slice(None)] * n
        low[d] = slice(0, nc)
        if grid.periodic[d]:
            high_idx = np.roll(idx, -1, axis=d)
        else:
            high[d] = slice(1, nc + 1)
            high_idx = idx[tuple(high)]
        low_idx = idx[tuple(low)]
        for fidx, sign in ((high_idx, 1.0), (low_idx, -1.0)):
            ok = fluid & (fidx >= 0)
            rows.append(cell_index[ok])
            cols.append(fidx[ok] + offsets[d])
            vals.append(np.full(int(ok.sum()), sign * coef))
    B = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(int(fluid.sum()), offsets[-1])).tocsr()

    traction = []
    for d in range(n):
        if grid.periodic[d]:
            continue
        for side, k, sign in ((0, 0, -1.0), (1, grid.shape[d], 1.0)):
            if bc[d][side] != TRACTION:
                continue
            sl = [slice(None)] * n
            sl[d] = k
            sub = face_index[d][tuple(sl)]
            ok = sub >= 0
            traction.append({"component": d, "side": side, "normal_sign": sign,
                             "slice_index": k, "indices": sub[ok] + offsets[d],
                             "area": vol / h[d]})
    has_traction = any(TRACTION in sides for sides in bc)
    return MacSystem(grid=grid, fluid=fluid, bc=bc, face_masks=masks, face_index=face_index,
                     offsets=offsets, blocks=blocks, mass=mass, B=B, cell_index=cell_index,
                     traction_faces=traction, pressure_nullspace=not has_traction)


def traction_rhs(system: MacSystem, pb_func) -> np.ndarray:
    """Boundary term ``-int_S p_b nu . phi`` for the traction sides."""
    rhs = np.zeros(system.n_velocity)
    g = system.grid
    for t in system.traction_faces:
        d = t["component"]
        coords = g.face_coordinates(d)
        sl = [slice(None)] * g.dim
        sl[d] = t["slice_index"]
        pts = [c[tuple(sl)] for c in coords]
        act = system.face_masks[d][tuple(sl)]
        vals = np.broadcast_to(np.asarray(pb_func(*pts), dtype=float), pts[0].shape)[act]
        rhs[t["indices"]] -= t["normal_sign"] * vals * t["area"]
    return rhs


# cell-centred finite volumes on masked grids


def fv_pairs(grid: StructuredGrid, active: np.ndarray, axis: int):
    """Flat indices (into the compressed active numbering) of face-adjacent
    active cell pairs across ``axis``; faces touching inactive cells are dropped."""
    idx = np.full(grid.shape, -1, dtype=np.int64)
    idx[active] = np.arange(int(active.sum()))
    lo, hi = _shift(idx, axis, grid.periodic[axis])
    ok = (lo >= 0) & (hi >= 0)
    return lo[ok], hi[ok]


def fv_stiffness(grid: StructuredGrid, active: np.ndarray, coef, axes=None) -> sp.csr_matrix:
    """Integrated stiffness ``sum_faces coef_a vol/h_a^2 (v_hi - v_lo)(w_hi - w_lo)``.

    ``coef`` is a scalar or one value per axis; ``axes`` restricts the
    coupling directions (``None`` means all).
    """
    n = grid.dim
    coef = np.broadcast_to(np.asarray(coef, dtype=float), (n,))
    axes = range(n) if axes is None else axes
    N = int(active.sum())
    rows, cols, vals = [], [], []
    for a in axes:
        lo, hi = fv_pairs(grid, active, a)
        w = coef[a] * grid.cell_volume / grid.spacing[a] ** 2
        rows += [lo, hi, lo, hi]
        cols += [lo, hi, hi, lo]
        vals += [np.full(lo.size, w)] * 2 + [np.full(lo.size, -w)] * 2
    if not rows:
        return sp.csr_matrix((N, N))
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(N, N)).tocsr()

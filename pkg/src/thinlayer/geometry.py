"""Reference cell, thin perforated layer and their boundary classification."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .discrete import TRACTION, WALL, StructuredGrid
from .errors import (AdmissibilityError, DisconnectedFluidError, EmptyFluidError,
                     GeometryError, InvalidInclusionError, NonRepresentableError,
                     OutOfRangeError)

SHAPES = ("none", "ball", "box", "cylinder")

# face tags of a layer
TAG_INTERIOR = 0
TAG_TOP = 1
TAG_BOTTOM = 2
TAG_LATERAL = 3
TAG_INTERFACE = 4
TAG_SOLID = 5


def as_fraction(x) -> Fraction:
    """Exact rational from a Fraction, int, ``"p/q"`` string or a float that is exactly p/q."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, str):
        return Fraction(x.strip())
    fx = Fraction(float(x)).limit_denominator(10**9)
    if float(fx) != float(x):
        raise NonRepresentableError(f"{x!r} is not an exact rational")
    return fx


def integer_root(value: int, q: int) -> Optional[int]:
    """Exact integer q-th root, or None."""
    if value < 0:
        return None
    k = int(round(value ** (1.0 / q)))
    for cand in (k - 1, k, k + 1):
        if cand >= 0 and cand ** q == value:
            return cand
    return None


@dataclass(frozen=True)
class AdmissibleScales:
    eps: Fraction
    alpha: Fraction
    eps_alpha: Fraction
    cells_per_half_thickness: int  # eps**alpha / eps

    @property
    def inv_eps(self) -> int:
        return self.eps.denominator


def check_admissible_scales(eps, alpha) -> AdmissibleScales:
    """Exact check that 1/eps and eps**alpha/eps are both natural numbers.

    With alpha = p/q in lowest terms and 1/eps = N, eps**alpha is rational
    exactly when N is a perfect q-th power k**q, and then eps**alpha/eps = k**(q-p).
    """
    eps = as_fraction(eps)
    alpha = as_fraction(alpha)
    if not 0 < eps < 1:
        raise OutOfRangeError(f"eps={eps} outside (0, 1)")
    if not 0 < alpha < 1:
        raise OutOfRangeError(f"alpha={alpha} outside (0, 1)")
    if eps.numerator != 1:
        raise AdmissibilityError(f"1/eps = {1 / eps} is not a natural number")
    N = eps.denominator
    p, q = alpha.numerator, alpha.denominator
    k = integer_root(N, q)
    if k is None:
        raise NonRepresentableError(
            f"eps**alpha irrational for eps=1/{N}, alpha={alpha}: {N} is not a perfect {q}-th power")
    eps_alpha = Fraction(1, k ** p)
    ratio = eps_alpha / eps
    if ratio.denominator != 1:  # cannot happen for q > p, kept as a guard
        raise AdmissibilityError(f"eps**alpha/eps = {ratio} is not a natural number")
    return AdmissibleScales(eps, alpha, eps_alpha, int(ratio))


@dataclass(frozen=True)
class InclusionSpec:
    """Solid inclusion in the reference cell, in cell units.

    ``size`` is a radius for balls/disks or a tuple of half-widths for boxes.
    For cylinders ``center`` and ``size`` describe the horizontal cross-section
    and ``section`` is ``"ball"`` or ``"box"``.
    """

    shape: str = "ball"
    center: tuple = None
    size: object = 0.25
    section: str = "ball"

    def __post_init__(self):
        shape = {"disk": "ball", "sphere": "ball"}.get(self.shape, self.shape)
        object.__setattr__(self, "shape", shape)
        if shape not in SHAPES:
            raise InvalidInclusionError(f"unknown inclusion shape {self.shape!r}")
        section = {"disk": "ball"}.get(self.section, self.section)
        object.__setattr__(self, "section", section)

    def resolved_center(self, n: int) -> np.ndarray:
        k = n - 1 if self.shape == "cylinder" else n
        if self.center is None:
            return np.full(k, 0.5)
        c = np.asarray(self.center, dtype=float)
        if c.shape != (k,):
            raise InvalidInclusionError(f"center needs {k} coordinates, got {c.shape}")
        return c

    def half_widths(self, k: int) -> np.ndarray:
        s = np.atleast_1d(np.asarray(self.size, dtype=float))
        if s.size == 1:
            s = np.full(k, float(s[0]))
        if s.shape != (k,):
            raise InvalidInclusionError(f"size needs 1 or {k} entries")
        return s

    def validate(self, n: int) -> None:
        if self.shape == "none":
            return
        c = self.resolved_center(n)
        k = c.size
        kind = self.section if self.shape == "cylinder" else self.shape
        if kind == "ball":
            r = float(np.atleast_1d(self.size)[0])
            lo, hi = c - r, c + r
            if r <= 0:
                raise InvalidInclusionError("radius must be positive")
        else:
            hw = self.half_widths(k)
            if np.any(hw <= 0):
                raise InvalidInclusionError("half-widths must be positive")
            lo, hi = c - hw, c + hw
        if np.any(lo <= 0) or np.any(hi >= 1):
            raise InvalidInclusionError(
                f"inclusion {self} is not strictly inside the open cell")

    def solid(self, coords: Sequence[np.ndarray]) -> np.ndarray:
        """Membership of points (arrays of y_1..y_n) in the solid part."""
        n = len(coords)
        if self.shape == "none":
            return np.zeros(np.shape(coords[0]), dtype=bool)
        c = self.resolved_center(n)
        pts = coords[:-1] if self.shape == "cylinder" else coords
        kind = self.section if self.shape == "cylinder" else self.shape
        if kind == "ball":
            r = float(np.atleast_1d(self.size)[0])
            dist2 = sum((p - ci) ** 2 for p, ci in zip(pts, c))
            return dist2 < r * r
        hw = self.half_widths(c.size)
        inside = np.ones(np.shape(coords[0]), dtype=bool)
        for p, ci, w in zip(pts, c, hw):
            inside &= np.abs(p - ci) < w
        return inside

    def as_dict(self) -> dict:
        size = self.size
        if isinstance(size, (tuple, list, np.ndarray)):
            size = [float(s) for s in size]
        else:
            size = float(size)
        return {"shape": self.shape,
                "center": None if self.center is None else [float(x) for x in self.center],
                "size": size, "section": self.section}


@dataclass(frozen=True)
class UnitCellGeometry:
    n: int
    inclusion: InclusionSpec
    m: int
    fluid_mask: np.ndarray = field(repr=False)

    @property
    def porosity(self) -> float:
        return float(self.fluid_mask.sum()) / self.m ** self.n

    @property
    def has_inclusion(self) -> bool:
        return not bool(self.fluid_mask.all())

    @property
    def grid(self) -> StructuredGrid:
        return StructuredGrid(shape=(self.m,) * self.n, spacing=(1.0 / self.m,) * self.n,
                              periodic=(True,) * self.n,
                              extents=(Fraction(1),) * self.n)


def periodic_labels(mask: np.ndarray, periodic_axes: Sequence[int]) -> tuple[np.ndarray, int]:
    """Face-connected components of ``mask``, glued across periodic axes.

    Returns labels (0 outside the mask, 1..k inside) and k.
    """
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    lab, k = ndimage.label(mask, structure=structure)
    parent = np.arange(k + 1)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for ax in periodic_axes:
        first = np.take(lab, 0, axis=ax)
        last = np.take(lab, -1, axis=ax)
        both = (first > 0) & (last > 0)
        for a, b in set(zip(first[both].tolist(), last[both].tolist())):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(a) for a in range(k + 1)])
    _, dense = np.unique(roots, return_inverse=True)
    return dense[lab], int(dense.max())


def _check_connected(mask: np.ndarray, periodic_axes: Sequence[int]) -> None:
    _, ncomp = periodic_labels(mask, periodic_axes)
    if ncomp != 1:
        raise DisconnectedFluidError(f"fluid splits into {ncomp} components")
    for a in periodic_axes:
        first = np.take(mask, 0, axis=a)
        last = np.take(mask, -1, axis=a)
        if not np.any(first & last):
            raise DisconnectedFluidError(f"fluid does not connect across periodic faces of axis {a}")


def build_unit_cell(spec: InclusionSpec, n: int, m: int) -> UnitCellGeometry:
    if n < 2:
        raise GeometryError("dimension n must be at least 2")
    if m < 8:
        raise GeometryError("resolution m must be at least 8")
    spec.validate(n)
    centers = (np.arange(m) + 0.5) / m
    coords = np.meshgrid(*([centers] * n), indexing="ij")
    fluid = ~spec.solid(coords)
    if not fluid.any():
        raise EmptyFluidError("inclusion fills the whole cell")
    _check_connected(fluid, range(n))
    fluid.setflags(write=False)
    return UnitCellGeometry(n=n, inclusion=spec, m=m, fluid_mask=fluid)


@dataclass(frozen=True)
class AreaProfile:
    values: np.ndarray
    a0: float

    @property
    def harmonic_mean(self) -> float:
        return float(1.0 / np.mean(1.0 / self.values))


def area_profile(cell: UnitCellGeometry) -> AreaProfile:
    """Horizontal fluid cross-section per vertical slab of the cell."""
    axes = tuple(range(cell.n - 1))
    A = cell.fluid_mask.sum(axis=axes) / cell.m ** (cell.n - 1)
    a0 = float(A.min())
    if a0 <= 0:
        raise GeometryError("a horizontal slab of the cell contains no fluid")
    A = np.asarray(A, dtype=float)
    A.setflags(write=False)
    return AreaProfile(values=A, a0=a0)


@dataclass(frozen=True)
class LayerGeometry:
    """Thin layer Sigma x (-eps^alpha, eps^alpha) tiled by eps-scaled cells."""

    cell: UnitCellGeometry
    scales: AdmissibleScales
    sigma: tuple  # ((a_1, b_1), ..., (a_{n-1}, b_{n-1})) with integer corners
    fluid_mask: np.ndarray = field(repr=False)

    @property
    def eps(self) -> Fraction:
        return self.scales.eps

    @property
    def alpha(self) -> Fraction:
        return self.scales.alpha

    @property
    def eps_alpha(self) -> Fraction:
        return self.scales.eps_alpha

    @property
    def n(self) -> int:
        return self.cell.n

    @property
    def cells_per_axis(self) -> tuple:
        """Number of eps-cells along each axis."""
        N = self.scales.inv_eps
        horiz = tuple((b - a) * N for a, b in self.sigma)
        return horiz + (2 * self.scales.cells_per_half_thickness,)

    @property
    def h(self) -> float:
        return float(self.eps / self.cell.m)

    def grid(self, lateral_periodic: bool = False) -> StructuredGrid:
        m = self.cell.m
        shape = tuple(c * m for c in self.cells_per_axis)
        hx = self.eps / m
        origin = tuple(float(a) for a, _ in self.sigma) + (-float(self.eps_alpha),)
        extents = tuple(Fraction(b - a) for a, b in self.sigma) + (2 * self.eps_alpha,)
        periodic = (lateral_periodic,) * (self.n - 1) + (False,)
        return StructuredGrid(shape=shape, spacing=(float(hx),) * self.n, periodic=periodic,
                              origin=origin, extents=extents)

    def stokes_bc(self) -> tuple:
        return ((WALL, WALL),) * (self.n - 1) + ((TRACTION, TRACTION),)

    @property
    def thickness(self) -> Fraction:
        return 2 * self.eps_alpha

    @property
    def measure(self) -> float:
        area = float(np.prod([b - a for a, b in self.sigma]))
        return area * float(self.thickness)

    @property
    def fluid_measure(self) -> float:
        return float(self.fluid_mask.sum()) * self.h ** self.n

    def face_tags(self, axis: int) -> np.ndarray:
        """Tag every face normal to ``axis`` (bounded-lateral layout)."""
        fl = self.fluid_mask
        shape = list(fl.shape)
        shape[axis] += 1
        tags = np.full(shape, TAG_SOLID, dtype=np.int8)
        lo = [slice(None)] * fl.ndim
        hi = [slice(None)] * fl.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a, b = fl[tuple(lo)], fl[tuple(hi)]
        mid = [slice(None)] * fl.ndim
        mid[axis] = slice(1, -1)
        tags[tuple(mid)] = np.where(a & b, TAG_INTERIOR,
                                    np.where(a ^ b, TAG_INTERFACE, TAG_SOLID))
        first = [slice(None)] * fl.ndim
        last = [slice(None)] * fl.ndim
        first[axis] = 0
        last[axis] = -1
        cf, cl = first, last
        if axis == self.n - 1:
            low_tag, high_tag = TAG_BOTTOM, TAG_TOP
        else:
            low_tag = high_tag = TAG_LATERAL
        tags[tuple(first)] = np.where(fl[tuple(cf)], low_tag, TAG_SOLID)
        tags[tuple(last)] = np.where(fl[tuple(cl)], high_tag, TAG_SOLID)
        return tags

    def cell_block(self, index: Sequence[int]) -> np.ndarray:
        """Fluid mask restricted to the eps-cell with integer position ``index``."""
        m = self.cell.m
        sl = tuple(slice(i * m, (i + 1) * m) for i in index)
        return self.fluid_mask[sl]


def build_layer(cell: UnitCellGeometry, eps, alpha, sigma=None) -> LayerGeometry:
    scales = check_admissible_scales(eps, alpha)
    n = cell.n
    if sigma is None:
        sigma = ((0, 1),) * (n - 1)
    sigma = tuple((int(a), int(b)) for a, b in sigma)
    if len(sigma) != n - 1:
        raise GeometryError(f"Sigma needs {n - 1} intervals")
    for a, b in sigma:
        if not a < b:
            raise GeometryError(f"empty Sigma interval {(a, b)}")
    N = scales.inv_eps
    reps = tuple((b - a) * N for a, b in sigma) + (2 * scales.cells_per_half_thickness,)
    fluid = np.tile(cell.fluid_mask, reps)
    if not fluid.any():
        raise EmptyFluidError("layer has no fluid")
    _check_connected(fluid, ())
    fluid.setflags(write=False)
    return LayerGeometry(cell=cell, scales=scales, sigma=sigma, fluid_mask=fluid)

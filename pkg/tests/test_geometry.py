import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thinlayer.errors import (AdmissibilityError, DisconnectedFluidError, EmptyFluidError,
                              InvalidInclusionError, NonRepresentableError, OutOfRangeError)
from thinlayer.geometry import (InclusionSpec, area_profile, build_layer, build_unit_cell,
                                check_admissible_scales, periodic_labels)

DISK = InclusionSpec("ball", size=0.25)


def test_admissible_examples():
    s = check_admissible_scales(Fraction(1, 4), Fraction(1, 2))
    assert s.eps_alpha == Fraction(1, 2) and s.cells_per_half_thickness == 2
    assert check_admissible_scales("1/16", "1/2").cells_per_half_thickness == 4
    with pytest.raises(NonRepresentableError):
        check_admissible_scales("1/3", "1/2")


def test_admissible_errors():
    with pytest.raises(OutOfRangeError):
        check_admissible_scales(Fraction(3, 2), Fraction(1, 2))
    with pytest.raises(OutOfRangeError):
        check_admissible_scales(Fraction(1, 4), Fraction(1))
    with pytest.raises(AdmissibilityError):
        check_admissible_scales(Fraction(2, 5), Fraction(1, 2))


@given(b=st.integers(2, 5), k=st.integers(1, 3), p=st.integers(1, 3))
def test_admissible_grid_family(b, k, p):
    # eps = b^(-q k) with alpha = p/q, q = p + 1 is always admissible
    q = p + 1
    eps = Fraction(1, b ** (q * k))
    s = check_admissible_scales(eps, Fraction(p, q))
    assert s.eps_alpha == Fraction(1, b ** (p * k))
    assert s.cells_per_half_thickness == b ** k


def test_disk_porosity_and_tolerance():
    for m in (32, 64):
        cell = build_unit_cell(DISK, 2, m)
        assert abs(cell.porosity - (1 - math.pi / 16)) <= 2 / m
        assert cell.porosity == cell.fluid_mask.sum() / m ** 2


def test_full_fluid_and_oversized():
    full = build_unit_cell(InclusionSpec("none"), 2, 16)
    assert full.porosity == 1.0 and not full.has_inclusion
    with pytest.raises((DisconnectedFluidError, InvalidInclusionError)):
        build_unit_cell(InclusionSpec("ball", size=0.6), 2, 32)


def test_disconnected_and_empty():
    # a box cutting the cell into two periodic slabs leaves a disconnected fluid
    with pytest.raises((DisconnectedFluidError, InvalidInclusionError)):
        build_unit_cell(InclusionSpec("box", center=(0.5, 0.5), size=(0.5, 0.2)), 2, 16)
    with pytest.raises((EmptyFluidError, InvalidInclusionError)):
        build_unit_cell(InclusionSpec("box", center=(0.5, 0.5), size=(0.5, 0.5)), 2, 16)


def test_periodic_labels_wrap():
    mask = np.zeros((8, 8), dtype=bool)
    mask[0, :] = mask[7, :] = True     # two rows joined across the periodic face
    labels, k = periodic_labels(mask, (0, 1))
    assert k == 1
    labels, k = periodic_labels(mask, ())
    assert k == 2


def test_layer_counting():
    cell = build_unit_cell(DISK, 2, 16)
    layer = build_layer(cell, "1/4", "1/2")
    assert layer.cells_per_axis == (4, 4)
    assert layer.thickness == Fraction(1)
    g = layer.grid()
    assert g.shape == (64, 64)
    assert g.origin[-1] == -0.5
    layer16 = build_layer(cell, "1/16", "1/2")
    assert layer16.fluid_mask.sum() == 16 * 8 * cell.fluid_mask.sum()
    assert layer16.grid().shape[-1] * layer16.grid().spacing[-1] == pytest.approx(0.5)


def test_layer_tiles_cell_exactly():
    cell = build_unit_cell(InclusionSpec("ball", center=(0.3, 0.6), size=0.2), 2, 16)
    layer = build_layer(cell, "1/16", "1/2")
    m = cell.m
    mask = layer.fluid_mask
    for i, j in [(0, 0), (5, 3), (15, 7)]:
        assert np.array_equal(mask[i * m:(i + 1) * m, j * m:(j + 1) * m], cell.fluid_mask)


def test_full_fluid_layer():
    cell = build_unit_cell(InclusionSpec("none"), 2, 8)
    layer = build_layer(cell, "1/4", "1/2")
    assert layer.fluid_mask.all()
    assert layer.fluid_measure == pytest.approx(float(layer.measure))


def test_area_profile():
    prof = area_profile(build_unit_cell(InclusionSpec("none"), 2, 16))
    assert np.all(prof.values == 1.0)
    cyl = build_unit_cell(InclusionSpec("cylinder", size=0.25), 3, 16)
    prof = area_profile(cyl)
    assert np.var(prof.values) == 0.0
    assert prof.values[0] == pytest.approx(cyl.porosity)
    m = 64
    cell = build_unit_cell(DISK, 2, m)
    prof = area_profile(cell)
    y = (np.arange(m) + 0.5) / m
    chord = 2 * np.sqrt(np.clip(0.25 ** 2 - (y - 0.5) ** 2, 0, None))
    assert np.abs(prof.values - (1 - chord)).max() <= 2 / m
    assert prof.values[m // 2] == prof.values.min() == prof.a0
    assert prof.a0 > 0
    assert prof.values.mean() == pytest.approx(cell.porosity, abs=1e-15)


@settings(max_examples=15, deadline=None)
@given(r=st.floats(0.05, 0.4), cx=st.floats(0.45, 0.55), cy=st.floats(0.45, 0.55))
def test_profile_is_discrete_fubini(r, cx, cy):
    cell = build_unit_cell(InclusionSpec("ball", center=(cx, cy), size=r), 2, 16)
    assert area_profile(cell).values.sum() / 16 == pytest.approx(cell.porosity, abs=1e-14)


def test_porosity_converges_first_order():
    exact = 1 - math.pi / 16
    errs = [abs(build_unit_cell(DISK, 2, m).porosity - exact) for m in (32, 128)]
    assert errs[1] <= errs[0] or errs[1] <= 2 / 128

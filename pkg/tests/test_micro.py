from fractions import Fraction

import numpy as np
import pytest

from thinlayer.cell_diffusion import DiffusionCase
from thinlayer.errors import CFLWarning, GeometryError
from thinlayer.geometry import InclusionSpec, build_layer, build_unit_cell
from thinlayer.micro import (DivergenceError, MicroStokesProblem, MicroTransportProblem,
                             solve_micro_stokes, solve_micro_transport)

HALF = Fraction(1, 2)


@pytest.fixture(scope="module")
def layer():
    cell = build_unit_cell(InclusionSpec("ball", size=0.25), 2, 8)
    return build_layer(cell, Fraction(1, 4), HALF)


@pytest.fixture(scope="module")
def flow(layer):
    f = lambda x, z: (0.5 * np.sin(2 * np.pi * x), 1 + z)
    pb = lambda x, z: -0.3 * z * (1 + 0.4 * np.cos(2 * np.pi * x))
    return solve_micro_stokes(MicroStokesProblem(layer, f, pb), tol=1e-10)


def test_stokes_equilibrium(layer):
    sol = solve_micro_stokes(MicroStokesProblem(layer, lambda x, z: (0 * x, 0 * x),
                                                lambda x, z: 0 * x + 2.5))
    # solver tolerance is relative to the traction load
    assert np.abs(sol.u).max() <= 1e-8 * 2.5
    assert np.abs(sol.p - 2.5).max() <= 1e-8 * 2.5


def test_stokes_cut_fluxes_constant(flow):
    cuts = flow.cut_fluxes()
    assert np.abs(cuts - cuts.mean()).max() <= 1e-8 * np.abs(cuts).max()
    assert flow.max_divergence() <= 1e-8 * np.abs(flow.u).max() * 32
    assert np.allclose(flow.column_velocity().shape, (4,))


def test_stokes_linearity(layer, flow):
    f = lambda x, z: (np.sin(2 * np.pi * x), 2 * (1 + z))
    pb = lambda x, z: -0.6 * z * (1 + 0.4 * np.cos(2 * np.pi * x))
    double = solve_micro_stokes(MicroStokesProblem(layer, f, pb), tol=1e-10)
    assert np.allclose(double.u, 2 * flow.u, atol=1e-8 * np.abs(flow.u).max())


def test_transport_zero_data(layer, flow):
    sol = solve_micro_transport(MicroTransportProblem(layer, DiffusionCase("D1"), flow,
                                                      snapshot_times=[0.5, 1.0]))
    assert all(np.all(s == 0) for s in sol.snapshots)


def test_transport_maximum_principle_and_ledger(layer, flow):
    cb = lambda t, x, z: (1 - np.exp(-t / 0.25)) * (1 + z) / 2
    sol = solve_micro_transport(MicroTransportProblem(
        layer, DiffusionCase("D1"), flow, cb=cb, T=1.0, dt=0.05,
        snapshot_times=[0.1 * k for k in range(11)]))
    for s in sol.snapshots:
        assert s.min() >= -1e-12 and s.max() <= 1 + 1e-12
    assert sol.max_ledger_residual <= 1e-10


def test_transport_periodic_ledger(layer, flow):
    sol = solve_micro_transport(MicroTransportProblem(
        layer, DiffusionCase("D2"), flow, g=lambda t, x, z: 1 + 0.5 * np.sin(2 * np.pi * x),
        cb=0.2, T=0.5, dt=0.05))
    assert sol.max_ledger_residual <= 1e-10
    assert sol.final[layer.fluid_mask].min() > 0


def test_heat_oracle():
    # full fluid, no flow, x-independent data: a 1-D implicit Euler heat problem
    cell = build_unit_cell(InclusionSpec("none"), 2, 8)
    lay = build_layer(cell, Fraction(1, 4), HALF)
    D, T, dt = 1.5, 0.4, 0.02
    sol = solve_micro_transport(MicroTransportProblem(lay, DiffusionCase("D1", D), None,
                                                      g=2.0, cb=1.0, T=T, dt=dt))
    ea = float(lay.eps_alpha)
    nz = lay.grid().shape[-1]
    h = 2 * ea / nz
    k = D * ea
    A = np.zeros((nz, nz))
    for i in range(nz):
        for j in (i - 1, i + 1):
            if 0 <= j < nz:
                A[i, i] += k / h ** 2
                A[i, j] -= k / h ** 2
    A[0, 0] += 2 * k / h ** 2
    A[-1, -1] += 2 * k / h ** 2
    b = np.zeros(nz)
    b[[0, -1]] = 2 * k / h ** 2
    c = np.zeros(nz)
    M = np.eye(nz) / (ea * dt) + A
    for _ in range(int(round(T / dt))):
        c = np.linalg.solve(M, c / (ea * dt) + 2.0 / ea + b)
    assert np.abs(sol.final - c[None, :]).max() <= 1e-12


def test_divergence_error(layer, flow):
    import copy
    bad = copy.copy(flow)
    bad.u = flow.u.copy()
    bad.u[len(bad.u) // 2] += 0.1 * np.abs(flow.u).max()
    with pytest.raises(DivergenceError):
        solve_micro_transport(MicroTransportProblem(layer, DiffusionCase("D1"), bad, T=0.1))


def test_central_peclet_warning(layer, flow):
    with pytest.warns(CFLWarning):
        solve_micro_transport(MicroTransportProblem(layer, DiffusionCase("D1", 1e-3), flow,
                                                    T=0.05, advection="central"))


def test_problem_validation(layer):
    with pytest.raises(GeometryError):
        MicroTransportProblem(layer, DiffusionCase("D2"), None, lateral="neumann")
    with pytest.raises(ValueError):
        MicroTransportProblem(layer, DiffusionCase("D1"), None, lateral="open")
    with pytest.raises(GeometryError):
        MicroStokesProblem(object(), None, None)

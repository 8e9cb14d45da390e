import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thinlayer.convergence import (DataRecipe, SweepPlan, ZERO_RECIPE, expected_exponents,
                                   fit_slope, scaling_study, two_scale_error)
from thinlayer.errors import (AdmissibilityError, InsufficientPointsError, NonpositiveValueError,
                              SamplerRangeError)
from thinlayer.geometry import InclusionSpec, build_layer, build_unit_cell

EPS = [Fraction(1, 4), Fraction(1, 16), Fraction(1, 64)]


def test_fit_slope_exact_power():
    fit = fit_slope([(e, 3 * e ** 2.25) for e in EPS])
    assert fit.slope == pytest.approx(2.25, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3), abs=1e-12)
    assert fit.r2 == pytest.approx(1.0) and fit.stderr < 1e-12
    s, c, r2 = fit
    assert s == fit.slope


def test_fit_slope_known_regression():
    # log-log points (0,0), (1,1), (2,3): slope 1.5, r2 = 1 - (1/6)/(14/3)
    pts = [(1.0, 1.0), (math.e, math.e), (math.e ** 2, math.e ** 3)]
    fit = fit_slope(pts)
    assert fit.slope == pytest.approx(1.5)
    assert fit.intercept == pytest.approx(-1 / 6)
    assert fit.r2 == pytest.approx(1 - (1 / 6) / (14 / 3))
    assert fit.stderr == pytest.approx(math.sqrt((1 / 6) / 2))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(-3, 3))
def test_fit_slope_scale_invariance(c, p):
    vals = [1.0, 0.4, 0.05]
    a = fit_slope([(e, v * e ** p) for e, v in zip(EPS, vals)])
    b = fit_slope([(e, c * v * e ** p) for e, v in zip(EPS, vals)])
    assert a.slope == pytest.approx(b.slope, abs=1e-9)
    assert a.r2 == pytest.approx(b.r2, abs=1e-9)


def test_fit_slope_errors():
    with pytest.raises(InsufficientPointsError):
        fit_slope([(0.5, 1.0), (0.25, 0.5)])
    with pytest.raises(NonpositiveValueError):
        fit_slope([(0.5, 1.0), (0.25, 0.0), (0.125, 0.1)])


def test_expected_exponents():
    e = expected_exponents(Fraction(1, 2))
    assert e == {"u_l2": 2.25, "u_grad": 1.25, "p_l2": 0.75, "c_l2": 0.25}


@pytest.fixture(scope="module")
def layer():
    return build_layer(build_unit_cell(InclusionSpec("ball", size=0.25), 2, 8), EPS[1], Fraction(1, 2))


def test_two_scale_error_basics(layer):
    rng = np.random.default_rng(0)
    v = rng.normal(size=50)
    w = np.full(50, 0.01)
    assert two_scale_error(v, v, w, layer) == 0.0
    assert two_scale_error(2 * v, v, w, layer) == pytest.approx(1.0)
    assert two_scale_error(np.zeros(3), np.zeros(3), np.ones(3), layer) == 0.0
    # with an explicit limit norm the eps^(a/2) factor appears
    err = two_scale_error(v + 1, v, w, layer, limit_norm=2.0)
    assert err == pytest.approx(math.sqrt(0.5) / (math.sqrt(0.25) * 2.0))
    with pytest.raises(SamplerRangeError):
        two_scale_error(v, v, w, layer, z=np.linspace(-1, 1.01, 50))


def test_recipe_data():
    r = DataRecipe()
    x, z = np.array([0.25]), np.array([1.0])
    assert np.allclose(r.F(x, z)[0], 0.25)
    assert r.C(0.0, x, z) == pytest.approx(0.0)
    assert ZERO_RECIPE.is_zero and not r.is_zero
    assert r.linf_bound(2.0) == pytest.approx(1.25 * r.conc + 3.0 * r.source)


def test_plan_validation():
    with pytest.raises(InsufficientPointsError):
        SweepPlan(EPS[:2])
    with pytest.raises(ValueError):
        SweepPlan(EPS[::-1])
    with pytest.raises(AdmissibilityError):
        SweepPlan([Fraction(1, 3), Fraction(1, 9), Fraction(1, 27)])


def test_zero_recipe_degenerate():
    rep = scaling_study(SweepPlan(EPS[:2] + [Fraction(1, 36)], m_c=8, recipe=ZERO_RECIPE, T=0.1))
    assert rep.degenerate and rep.slopes == {} and rep.checks == {}
    assert all(v == 0 for r in rep.records for v in r.norms.values())


@pytest.mark.slow
def test_small_sweep_report(tmp_path):
    rep = scaling_study(SweepPlan(EPS, m_c=8, T=0.5))
    d = json.loads(rep.to_json())
    assert set(d["slopes"]) == {"u_l2", "u_grad", "p_l2", "c_l2"}
    assert "seconds" not in json.dumps(d)
    assert rep.checks["linf_bounded"]
    assert rep.slopes["u_l2"]["slope"] >= 2.25 - 0.3
    rep.write_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("quantity,eps,value,reference")

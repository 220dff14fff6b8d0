import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fluxcrit import criterion
from fluxcrit.criterion import (Verdict, cauchy_schwarz_exact, default_r_grid, fit_power_law,
                                flux_scan, geometric_grid, jensen_check, nested_sets_check,
                                rotating_threshold_study, shell_scan, threshold_exponent)
from fluxcrit.entryset import classify
from fluxcrit.errors import ConfigError, MeshMismatch
from fluxcrit.field import Rotating, Sink, Uniform, superpose
from fluxcrit.tracer import TraceConfig

DOWN = Uniform((0, 0, -1))
GRID = geometric_grid(0.4, 0.025)


def test_threshold_exponent():
    # r^(1/2) at p = 2 is the stated rate; the general law comes from Hoelder on the shell
    assert threshold_exponent(2) == 0.5
    assert threshold_exponent(3) == 1.0
    assert threshold_exponent(1.5) == 0.0
    with pytest.raises(ValueError):
        threshold_exponent(0.5)


def test_grids():
    np.testing.assert_allclose(GRID, [0.4, 0.2, 0.1, 0.05, 0.025])
    g = default_r_grid(2.0, 1e-10)
    assert g[0] == 1.0 and g[-1] >= 2.0 / 256 * (1 - 1e-12)
    assert np.all(np.diff(g) < 0)
    assert default_r_grid(1.0, 1e-5)[-1] >= 0.1 * 0.5
    with pytest.raises(ConfigError):
        criterion._check_grid([0.1, 0.2], 1.0)
    with pytest.raises(ConfigError):
        criterion._check_grid([1.5, 0.2], 1.0)
    with pytest.raises(ConfigError):
        criterion._check_grid([0.2, 0.0], 1.0)


@given(st.floats(0.01, 100), st.floats(-3, 3), st.integers(3, 8))
def test_fit_recovers_power_law(C, beta, n):
    r = geometric_grid(0.5, 0.5 * 2.0 ** -(n - 1))
    Cf, bf, res = fit_power_law(r, C * r ** beta)
    assert Cf == pytest.approx(C, rel=1e-9)
    assert bf == pytest.approx(beta, abs=1e-9)
    assert res < 1e-9


@given(st.lists(st.tuples(st.floats(1e-6, 1e3), st.floats(0, 1e3)), min_size=1, max_size=30))
def test_cauchy_schwarz_exact(pairs):
    w, s = map(np.array, zip(*pairs))
    assert cauchy_schwarz_exact(w, s)
    assert cauchy_schwarz_exact(w, np.full_like(w, 3.25))


def test_jensen_sink_is_tight():
    emap = classify(Sink(1), 1.0, 0.1, 4)
    j = jensen_check(Sink(1), emap, C=1.0)
    want = 1 / (4 * math.pi * 0.01)
    for v in (j.F2, j.mean_term, j.flux_term):
        assert v == pytest.approx(want, rel=1e-10)
    assert j.holds
    js = j.to_json()
    assert js["C_eff"] == pytest.approx(1.0 / 0.1, rel=1e-10)      # flux^2 / r
    assert js["shell_bound"] == pytest.approx(1 / (4 * math.pi * 0.1))
    assert js["shell_bound_holds"] is True or js["F2"] >= js["shell_bound"] * (1 - 1e-12)


def test_jensen_uniform_strict():
    emap = classify(DOWN, 1.0, 0.1, 5)
    j = jensen_check(DOWN, emap)
    assert j.F2 >= j.mean_term > j.flux_term > 0
    assert j.holds


def test_jensen_empty_set():
    emap = classify(Rotating(3), 1.0, 0.1, 3)
    j = jensen_check(Rotating(3), emap)
    assert j.flux_term == 0 and j.holds


def test_sink_scan_satisfied():
    scan = flux_scan(Sink(1), 1.0, 2, geometric_grid(0.4, 0.1), level=3)
    assert scan.verdict == Verdict.SATISFIED
    assert abs(scan.beta_fit) < 1e-6 and scan.C_fit == pytest.approx(1, rel=1e-6)
    assert scan.verdict_line() == "CRITERION SATISFIED: beta=0.00 threshold=0.50"
    assert all(rec["jensen"]["holds"] for rec in scan.records)
    assert criterion.EVIDENCE_NOTE in scan.notes


def test_rotating_scan_empty():
    scan = flux_scan(Rotating(3), 1.0, 2, GRID, level=3)
    assert scan.verdict == Verdict.FAILED
    assert scan.fit is None
    assert any("entry set empty" in n for n in scan.notes)
    assert scan.verdict_line().startswith("CRITERION FAILED: beta=nan")


def test_uniform_scan_fails():
    scan = flux_scan(DOWN, 1.0, 2, geometric_grid(0.4, 0.1), level=4)
    assert scan.verdict == Verdict.FAILED
    assert scan.beta_fit == pytest.approx(2.0, abs=0.05)
    for rec in scan.records:
        assert rec["flux_lo"] == pytest.approx(math.pi * rec["r"] ** 2, rel=0.03)


def test_scale_covariance():
    lam = 10.0
    grid = geometric_grid(0.4, 0.1)
    for field in (Sink(1), superpose(1, Sink(1), 1, Rotating(2))):
        a = flux_scan(field, 1.0, 2, grid, level=3, refine_rtol=None)
        b = flux_scan(superpose(lam, field, 0, field), 1.0, 2, grid, level=3, refine_rtol=None)
        assert b.C_fit == pytest.approx(lam * a.C_fit, rel=1e-9)
        assert b.beta_fit == pytest.approx(a.beta_fit, abs=1e-9)
        sa = shell_scan(field, 2, grid, 3)
        sb = shell_scan(superpose(lam, field, 0, field), 2, grid, 3)
        np.testing.assert_allclose(sb.F, lam ** 2 * sa.F, rtol=1e-12)
        assert sb.q_fit == pytest.approx(sa.q_fit, abs=1e-9)


def test_tail_exponent_sees_small_r_divergence():
    # F_2 = 1/(4 pi r^2) + 8 pi/3: the constant holds the whole-grid slope below 1
    sc = shell_scan(superpose(1, Sink(1), 1, Rotating(2)), 2, GRID, 3)
    assert sc.q_fit < 1 <= sc.q_tail
    assert sc.divergent


def test_satisfied_implies_divergent_shell():
    grid = GRID
    for field in (Sink(1), superpose(1, Sink(1), 1, Rotating(2)), superpose(1, Sink(1), 0.5, Rotating(1))):
        scan = flux_scan(field, 1.0, 2, grid, level=3)
        assert scan.verdict == Verdict.SATISFIED
        assert all(m.undetermined_fraction == 0 for m in scan.maps)
        assert shell_scan(field, 2, grid, 3).divergent


def test_inconclusive_when_undetermined():
    scan = flux_scan(DOWN, 1.0, 2, geometric_grid(0.4, 0.1), level=2, cfg=TraceConfig(max_steps=1),
                     refine_rtol=None)
    assert scan.verdict == Verdict.INCONCLUSIVE
    assert any("undetermined" in n for n in scan.notes)


def test_decision_rule():
    r = GRID
    usable = np.ones(5, bool)
    empty = np.zeros(5, bool)
    notes = []
    # exact r^0.5 law sits on the threshold
    fit, v = criterion._decide(r, 2 * r ** 0.5, usable, empty, 2, 0.05, notes)
    assert v == Verdict.SATISFIED and fit["beta_fit"] == pytest.approx(0.5)
    # r^1 decays too fast
    assert criterion._decide(r, r, usable, empty, 2, 0.05, [])[1] == Verdict.FAILED
    # a good fit with one point far below the fitted bound fails the pointwise check
    flux = r ** 0.5
    flux[2] *= 0.5
    fit, v = criterion._decide(r, flux, usable, empty, 2, 0.05, [])
    assert fit["beta_fit"] == pytest.approx(0.5) and not fit["pointwise_ok"] and v == Verdict.FAILED
    # too few points to fit
    few = np.zeros(5, bool)
    few[0] = True
    assert criterion._decide(r, np.ones(5), few, empty, 2, 0.05, [])[1] == Verdict.INCONCLUSIVE


def test_scan_exports():
    scan = flux_scan(Sink(1), 1.0, 2, geometric_grid(0.4, 0.2), level=2)
    js = scan.to_json()
    for key in ("p", "alpha", "grid", "records", "fit", "verdict", "notes"):
        assert key in js
    lines = scan.to_csv().splitlines()
    assert lines[0] == "r,flux_lo,flux_hi,measure_lo,measure_hi,undetermined_fraction"
    assert len(lines) == 3
    with pytest.raises(ConfigError):
        flux_scan(Sink(1), 1.0, 0.5, [0.2], level=1)


def test_shell_scan_examples():
    sc = shell_scan(Sink(1), 2, GRID, 4)
    np.testing.assert_allclose(sc.F, 1 / (4 * math.pi * GRID ** 2), rtol=1e-6)
    assert sc.q_fit == pytest.approx(2, abs=0.02) and sc.divergent
    assert sc.verdict_line() == "divergent near 0 (q=2.0)"
    sc = shell_scan(Rotating(3), 2, GRID, 4)
    np.testing.assert_allclose(sc.F, 8 * math.pi / 3 / GRID ** 2, rtol=1e-3)
    assert sc.q_fit == pytest.approx(2, abs=0.02) and sc.divergent
    sc = shell_scan(DOWN, 2, GRID, 4)
    np.testing.assert_allclose(sc.F, 4 * math.pi * GRID ** 2, rtol=1e-10)
    assert sc.q_fit == pytest.approx(-2, abs=1e-6) and not sc.divergent
    assert sc.verdict_line() == "convergent near 0 (q=-2.0)"
    assert sc.to_csv().splitlines()[0] == "r,F_p"
    assert np.all(sc.F >= 0)


def test_rotating_threshold_from_data():
    study = rotating_threshold_study((2.0, 2.5, 3.0), level=3)
    for row in study["rows"]:
        assert row["q_fit"] == pytest.approx(2 * row["gamma"] - 4, abs=0.05)
    assert study["threshold_gamma"] == pytest.approx(2.5, abs=0.05)
    assert [row["divergent"] for row in study["rows"]] == [False, True, True]


def test_nesting():
    rs = (0.4, 0.2, 0.1)
    sink = nested_sets_check([classify(Sink(1), 1.0, r, 3) for r in rs])
    assert sink and sink.hypothesis_met and sink.measures_monotone
    assert sink.common_flux[-1] == pytest.approx(1, abs=1e-6)
    down = nested_sets_check([classify(DOWN, 1.0, r, 5) for r in rs])
    assert down.nested and not down.hypothesis_met
    rot = nested_sets_check([classify(Rotating(2), 1.0, r, 2) for r in rs])
    assert rot.nested and not rot.hypothesis_met
    with pytest.raises(MeshMismatch):
        nested_sets_check([classify(Sink(1), 1.0, 0.4, 2), classify(Sink(1), 1.0, 0.2, 3)])
    with pytest.raises(ValueError):
        nested_sets_check([classify(Sink(1), 1.0, 0.2, 1), classify(Sink(1), 1.0, 0.4, 1)])

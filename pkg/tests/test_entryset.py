import math

import numpy as np
import pytest

from fluxcrit.entryset import Status, classify, refine, refine_until, stability_probe
from fluxcrit.errors import BadRadii
from fluxcrit.field import Rotating, Sink, Uniform, superpose
from fluxcrit.spheremesh import integrate_flux
from fluxcrit.tracer import TraceConfig

DOWN = Uniform((0, 0, -1))
CAP_AREA = 2 * math.pi * (1 - math.sqrt(1 - 0.01))


@pytest.fixture(scope="module")
def sink_map():
    return classify(Sink(1), 1.0, 0.1, 5)


@pytest.fixture(scope="module")
def down_map():
    return classify(DOWN, 1.0, 0.1, 6, workers=2)


def check_invariants(m):
    assert 0 <= m.measure_lo <= m.measure_hi <= 4 * math.pi * m.alpha ** 2 * (1 + 1e-12)
    assert np.all(m.normal_flow[m.member_mask] < 0)
    assert m.flux_lo_mag <= m.flux_hi_mag
    assert m.signed_flux_member <= 0
    assert abs(m.signed_flux_member) == m.flux_lo_mag
    assert m.bracket_lo <= m.measure_lo and m.measure_hi <= m.bracket_hi


def test_sink_everything_enters(sink_map):
    m = sink_map
    assert m.counts()["member"] == 20480 == len(m.mesh)
    assert m.measure_lo == pytest.approx(4 * math.pi, rel=1e-10)
    assert m.measure_hi == m.measure_lo
    assert m.signed_flux_member == pytest.approx(-1, abs=1e-6)
    check_invariants(m)
    r = refine(m, 2)
    assert r.refined_levels == 0 and np.array_equal(r.status, m.status)


def test_rotating_entry_set_is_empty():
    m = classify(Rotating(2), 1.0, 0.1, 4)
    assert m.counts()["tangential"] == len(m.mesh)
    assert m.is_empty
    assert (m.measure_lo, m.measure_hi) == (0.0, 0.0)
    check_invariants(m)
    assert np.array_equal(refine(m, 1).status, m.status)


def test_uniform_cap_geometry(down_map):
    m = down_map
    check_invariants(m)
    assert m.measure_lo == pytest.approx(CAP_AREA, rel=0.03)
    assert m.signed_flux_member == pytest.approx(-math.pi * 0.01, rel=0.03)
    # oracle: vertical line through eta meets B_r iff z > 0 and rho < r
    c = m.mesh.centroids
    rho = np.hypot(c[:, 0], c[:, 1])
    h = float(m.mesh.sizes().max())
    inside = (c[:, 2] > 0) & (rho < 0.1 - h)
    outside = (c[:, 2] <= 0) | (rho > 0.1 + h)
    assert np.all(m.status[inside] == Status.MEMBER)
    assert not np.any(m.status[outside] == Status.MEMBER)


def test_refine_shrinks_bracket(down_map):
    m = down_map
    w0 = m.bracket_hi - m.bracket_lo
    r1 = refine(m, 1)
    r2 = refine(r1, 1)
    w1 = r1.bracket_hi - r1.bracket_lo
    w2 = r2.bracket_hi - r2.bracket_lo
    assert w0 >= w1 >= w2
    assert w2 <= w0 / 2
    assert r2.refined_levels == 2
    assert r2.bracket_lo <= CAP_AREA <= r2.bracket_hi
    assert r2.mesh.total_area() == pytest.approx(4 * math.pi, rel=1e-10)
    check_invariants(r2)
    # one call with two levels equals two single-level calls
    both = refine(m, 2)
    assert np.array_equal(both.status, r2.status)
    with pytest.raises(ValueError):
        refine(m, 0)


def test_refine_until_stops_at_target(down_map):
    r = refine_until(down_map, rtol=0.05, max_extra=5)
    assert r.bracket_hi - r.bracket_lo <= 0.05 * r.measure_lo or r.refined_levels == 5


def _member_subset(a, b):
    return np.all(~a.member_mask | b.member_mask)


@pytest.mark.parametrize("field", [Sink(1), DOWN, superpose(1, Sink(0.05), 1, DOWN),
                                   superpose(1, Sink(1), 1, Rotating(2))])
def test_monotone_in_r(field):
    small = classify(field, 1.0, 0.05, 4)
    big = classify(field, 1.0, 0.2, 4)
    assert _member_subset(small, big)
    assert small.measure_lo <= big.measure_lo


@pytest.mark.parametrize("field", [Sink(1), DOWN, superpose(1, Sink(0.05), 1, DOWN)])
def test_monotone_in_alpha_as_solid_angle(field):
    near = classify(field, 0.5, 0.1, 5)
    far = classify(field, 1.0, 0.1, 5)
    assert far.measure_lo / far.alpha ** 2 <= near.measure_hi / near.alpha ** 2 * (1 + 1e-12)


def test_raw_area_grows_with_alpha_for_sink():
    # the whole sphere enters, so the raw area is 4 pi alpha^2 and increases
    near = classify(Sink(1), 0.5, 0.1, 3)
    far = classify(Sink(1), 1.0, 0.1, 3)
    assert far.measure_lo > near.measure_hi


def test_point_interval_when_decided(down_map):
    m = down_map
    assert m.undetermined_fraction == 0
    assert m.flux_lo_mag == m.flux_hi_mag
    assert m.flux_lo_mag == abs(integrate_flux(m.mesh, DOWN, m.member_mask))


def test_undetermined_counts_only_inflow():
    cfg = TraceConfig(max_steps=2)
    m = classify(DOWN, 1.0, 0.1, 3, cfg)
    undet = m.status == Status.UNDETERMINED
    assert undet.any()
    assert np.all(m.normal_flow[undet] < 0)
    assert m.measure_hi > m.measure_lo
    assert m.undetermined_fraction > 0
    assert m.flux_hi_mag == pytest.approx(abs(integrate_flux(m.mesh, DOWN, undet | m.member_mask)))
    check_invariants(m)


def test_bad_radii():
    with pytest.raises(BadRadii):
        classify(Sink(1), 1.0, 1.0, 2)
    with pytest.raises(BadRadii):
        classify(Sink(1), 1.0, 0.0, 2)


def test_stability_probes(sink_map, down_map):
    assert stability_probe(Sink(1), sink_map, 100, 1e-3) == 1.0
    c = down_map.mesh.centroids
    interior = np.hypot(c[:, 0], c[:, 1]) < 0.08
    assert stability_probe(DOWN, down_map, 100, 1e-4, candidates=interior) == 1.0
    edge = np.abs(np.hypot(c[:, 0], c[:, 1]) - 0.1) < 0.01
    frac = stability_probe(DOWN, down_map, 100, 1e-2, candidates=edge, seed=1)
    assert 0.0 <= frac <= 1.0
    with pytest.raises(ValueError):
        stability_probe(Rotating(2), classify(Rotating(2), 1.0, 0.1, 1), 10, 1e-3)


def test_worker_independence():
    field = superpose(1, Sink(0.05), 1, DOWN)
    a = classify(field, 1.0, 0.1, 4, workers=1)
    b = classify(field, 1.0, 0.1, 4, workers=4)
    assert a.status.tobytes() == b.status.tobytes()
    assert a.summary() == b.summary()


def test_exports(down_map):
    js = down_map.to_json()
    for key in ("alpha", "r", "level", "counts", "measure_lo", "measure_hi", "flux_lo",
                "flux_hi", "signed_flux_member"):
        assert key in js
    assert js["field"].startswith("uniform")
    lines = down_map.status_csv().splitlines()
    assert lines[0] == "tri_index,status"
    assert len(lines) == len(down_map.mesh) + 1
    assert {l.split(",")[1] for l in lines[1:]} <= {"member", "non_member", "undetermined", "tangential"}


def test_masked_grid_core():
    from fluxcrit.field import GridField
    n = 41
    ax = np.linspace(-1.2, 1.2, n)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    P = np.stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")], 1)
    rad = np.linalg.norm(P, axis=1)
    S = Sink(1).evaluate(np.where(rad[:, None] < 0.05, 1.0, P))
    S[rad < 0.15] = np.nan
    g = GridField((n, n, n), (-1.2,) * 3, (2.4 / (n - 1),) * 3, S)
    # mask well inside B_r: the inner sphere is reached first
    assert classify(g, 1.0, 0.3, 1).counts()["member"] == 80
    # mask reaches outside B_r: traces abort and stay undetermined
    m = classify(g, 1.0, 0.1, 1)
    assert m.counts()["undetermined"] == 80
    assert m.measure_lo == 0 and m.measure_hi == pytest.approx(4 * math.pi, rel=1e-10)
    assert any("aborted" in n for n in m.notes)

import json
import math

import numpy as np
import pytest

from riskscape import datagen, landscape, models, optim
from riskscape.datagen import GenConfig
from riskscape.errors import InvalidInput
from riskscape.landscape import GridSpec
from riskscape.oracle import PopulationOracle
from riskscape.optim import Objective, OptConfig


def saddle():
    return Objective(
        value=lambda t: float(t[0] ** 2 - t[1] ** 2),
        grad=lambda t: np.array([2 * t[0], -2 * t[1]]),
        hess=lambda t: np.diag([2.0, -2.0]),
    )


def constant(p=2):
    return Objective(lambda t: 1.0, lambda t: np.zeros(p), lambda t: np.zeros((p, p)))


def half_norm(p=2):
    return optim.quadratic_objective(np.zeros(p))


def gmm_population():
    return PopulationOracle(models.ModelSpec("gmm2"), centers=(np.array([-1.5]), np.array([1.5])))


def test_convex_quadratic_single_minimum():
    c = np.array([0.3, -0.4, 0.2])
    pts = landscape.find_critical_points(optim.quadratic_objective(c, hess=np.diag([1, 2, 3.0])), np.zeros(3), 2.0,
                                         n_starts=20)
    assert len(pts) == 1
    assert pts[0].index == 0 and pts[0].kind == "minimum"
    np.testing.assert_allclose(pts[0].location, c, atol=1e-12)


def test_canonical_saddle():
    pts = landscape.find_critical_points(saddle(), np.zeros(2), 1.0, n_starts=20)
    assert len(pts) == 1
    assert pts[0].index == 1 and pts[0].kind == "saddle"
    assert np.linalg.norm(pts[0].location) <= 1e-12


def test_gmm_population_three_points():
    orc = gmm_population()
    pts = landscape.find_critical_points(orc.objective(), np.zeros(2), 3.5, n_starts=40, seed=3)
    assert len(pts) == 3
    mins = [c for c in pts if c.index == 0]
    assert len(mins) == 2
    sad = [c for c in pts if c.index >= 1]
    assert len(sad) == 1 and np.linalg.norm(sad[0].location) <= 1e-8
    for c in pts:
        assert np.linalg.norm(orc.grad(c.location)) <= 1e-8
    np.testing.assert_allclose(models.swap(mins[0].location), mins[1].location, atol=1e-8)
    # values sorted
    assert [c.value for c in pts] == sorted(c.value for c in pts)


def test_critical_point_invariants():
    pts = landscape.find_critical_points(gmm_population().objective(), np.zeros(2), 3.5, n_starts=20)
    for c in pts:
        tol = landscape.degeneracy_tol(c.eigenvalues)
        assert c.index == int(np.sum(c.eigenvalues < -tol))
        assert (c.kind == "degenerate") == bool(np.any(np.abs(c.eigenvalues) <= tol))
        assert list(c.eigenvalues) == sorted(c.eigenvalues)
    for i, a in enumerate(pts):
        for b in pts[i + 1:]:
            assert np.linalg.norm(a.location - b.location) >= 1e-6 * 3.5


def test_find_critical_points_preconditions():
    with pytest.raises(InvalidInput):
        landscape.find_critical_points(saddle(), np.zeros(2), 0.0)
    with pytest.raises(InvalidInput):
        landscape.find_critical_points(saddle(), np.zeros(2), 1.0, n_starts=0)


def test_certificate_quadratic_holds():
    cert = landscape.certify_strong_morse(half_norm(), np.zeros(2), 1.0, GridSpec(per_axis=21), 0.1, 0.5)
    assert cert.holds and cert.witnesses == []
    assert cert.max_eta == pytest.approx(1.0)


def test_certificate_constant_fails():
    cert = landscape.certify_strong_morse(constant(), np.zeros(2), 1.0, GridSpec(per_axis=11, n_boundary=8), 0.1, 0.5)
    assert not cert.holds
    assert cert.witnesses
    assert cert.n_near_critical == cert.n_interior
    assert any(w["where"] == "boundary" for w in cert.witnesses)
    assert all(w["min_abs_eigenvalue"] in (0.0, None) for w in cert.witnesses)


def test_certificate_saddle_holds():
    cert = landscape.certify_strong_morse(saddle(), np.zeros(2), 1.0, GridSpec(per_axis=21), 0.1, 0.5)
    assert cert.holds and cert.max_eta == pytest.approx(2.0)


def test_certificate_monotone():
    obj = gmm_population().objective()
    grid = GridSpec(per_axis=31)
    base = landscape.certify_strong_morse(obj, np.zeros(2), 1.0, grid, 0.1, 0.1)
    assert base.holds
    for eps, eta in ((0.05, 0.1), (0.1, 0.05), (0.01, 0.01)):
        assert landscape.certify_strong_morse(obj, np.zeros(2), 1.0, grid, eps, eta).holds


def test_certificate_gmm_positive_eta():
    cert = landscape.certify_strong_morse(gmm_population().objective(), np.zeros(2), 3.0, GridSpec(per_axis=41),
                                          0.05, 0.0)
    assert cert.max_eta is not None and cert.max_eta > 0


def test_certificate_budget():
    with pytest.raises(InvalidInput):
        landscape.certify_strong_morse(half_norm(3), np.zeros(3), 1.0, GridSpec(per_axis=60, budget=1000), 0.1, 0.1)
    with pytest.raises(InvalidInput):
        landscape.grid_points(np.zeros(5), 1.0, GridSpec(n_points=5000, budget=1000))
    interior, boundary = landscape.grid_points(np.ones(5), 1.0, GridSpec(n_points=500))
    assert interior.shape == (500, 5) and np.all(np.linalg.norm(interior - 1, axis=1) <= 1 + 1e-12)
    np.testing.assert_allclose(np.linalg.norm(boundary - 1, axis=1), 1.0)


def test_matching_examples():
    a = [np.array([0.0, 0.0]), np.array([1.0, 1.0]), np.array([-2.0, 0.5])]
    same = landscape.match_critical_points(a, a)
    assert [(i, j) for i, j, _, _ in same.pairs] == [(0, 0), (1, 1), (2, 2)]
    assert same.max_distance == 0 and not same.unmatched_a and not same.unmatched_b
    shift = np.array([0.01, -0.02])
    moved = landscape.match_critical_points(a, [x + shift for x in a[::-1]])
    assert [(i, j) for i, j, _, _ in moved.pairs] == [(0, 2), (1, 1), (2, 0)]
    for _, _, dist, _ in moved.pairs:
        assert dist == pytest.approx(np.linalg.norm(shift))
    partial = landscape.match_critical_points(a, a[:2])
    assert partial.unmatched_a == [2]
    far = landscape.match_critical_points(a, [x + 10 for x in a], max_distance=1.0)
    assert far.pairs == [] and far.unmatched_a == [0, 1, 2]


def test_matching_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = list(rng.standard_normal((4, 3)))
        b = list(rng.standard_normal((5, 3)))
        ab = {(i, j) for i, j, _, _ in landscape.match_critical_points(a, b).pairs}
        ba = {(j, i) for i, j, _, _ in landscape.match_critical_points(b, a).pairs}
        assert ab == ba


def test_spread_basics():
    assert landscape.spread(np.ones((2, 3))) == 0.0
    pts = np.array([[0.0, 0.0], [2.0, 0.0]])
    assert landscape.spread(pts) == pytest.approx(math.sqrt(2.0))
    rng = np.random.default_rng(1)
    x = rng.standard_normal((7, 4))
    assert landscape.spread(x) == pytest.approx(landscape.spread(x[rng.permutation(7)]), rel=1e-14)
    assert landscape.spread(x) == pytest.approx(math.sqrt(np.trace(np.cov(x.T))), rel=1e-12)
    with pytest.raises(InvalidInput):
        landscape.spread(x[:1])


def test_basin_spread_unique_minimum():
    data, theta0 = datagen.generate(GenConfig("classification", n=400, d=10, seed=0, theta0_norm=1.0))
    spec = models.ModelSpec("classification", radius=3.0)
    stats = landscape.basin_spread(spec, data, OptConfig(max_iter=20_000), n_inits=4, seed=2)
    assert stats.spread <= 1e-6 and stats.success and stats.n_failed == 0


def test_basin_spread_identical_inits_zero():
    data, _ = datagen.generate(GenConfig("classification", n=50, d=3, seed=0))
    spec = models.ModelSpec("classification", radius=3.0)
    init = np.array([0.1, 0.2, -0.1])
    stats = landscape.basin_spread(spec, data, OptConfig(max_iter=50), inits=[init, init])
    assert stats.spread == 0.0
    curve = landscape.init_spread_curve(spec, data, OptConfig(max_iter=50), inits=[init, init])
    assert np.all(curve == 0.0)


def test_basin_spread_gmm_split_basins():
    data, (c1, c2) = datagen.generate(GenConfig("gmm2", n=2000, d=1, separation=1.5, seed=0))
    spec = models.ModelSpec("gmm2")
    inits = [np.array([-1.0, 1.0]), np.array([1.0, -1.0]), np.array([-1.2, 0.8]), np.array([0.8, -1.2])]
    stats = landscape.basin_spread(spec, data, OptConfig(halving=True, max_iter=5000), inits=inits)
    assert not stats.success
    gap = np.linalg.norm(stats.finals[0] - stats.finals[1])
    assert gap == pytest.approx(np.linalg.norm(np.concatenate([c1, c2]) * 2), rel=0.1)
    assert stats.spread == pytest.approx(gap * math.sqrt(4 / 4 / 3) , rel=1e-6)


def test_basin_spread_requires_two_inits():
    data, _ = datagen.generate(GenConfig("classification", n=20, d=2, seed=0))
    with pytest.raises(InvalidInput):
        landscape.basin_spread(models.ModelSpec("classification"), data, OptConfig(), n_inits=1)


def test_divergence_counts_as_failure():
    obj = Objective(lambda t: -t[0] if t[0] < 5 else math.inf, lambda t: np.array([-10.0]))
    stats = landscape.basin_spread(None, None, OptConfig(), objective=obj, inits=[np.zeros(1), np.zeros(1)])
    assert stats.n_failed == 2 and not stats.success


def test_success_probability():
    mk = lambda ok: landscape.BasinStats(0.0, ok, np.zeros((2, 1)))
    assert landscape.success_probability([mk(True), mk(False), mk(True), mk(True)]) == (0.75, 4)
    with pytest.raises(InvalidInput):
        landscape.success_probability([])


def test_init_law_and_projection():
    inits = landscape.draw_inits(landscape.gaussian_init(25.0), 4, 500, seed=0)
    assert np.mean(np.sum(inits**2, axis=1)) == pytest.approx(25.0, rel=0.1)
    clipped = landscape.draw_inits(landscape.gaussian_init(25.0), 4, 50, seed=0, radius=1.0)
    assert np.all(np.linalg.norm(clipped, axis=1) <= 1 + 1e-12)
    np.testing.assert_array_equal(landscape.draw_inits(landscape.gaussian_init(), 3, 5, seed=9),
                                  landscape.draw_inits(landscape.gaussian_init(), 3, 5, seed=9))


def test_init_spread_curve_decays_sparse():
    data, _ = datagen.generate(GenConfig("classification", n=600, d=100, sparsity=5, seed=1))
    lam = 0.01 * math.sqrt(math.log(100) ** 2 / 600)
    spec = models.ModelSpec("classification", radius=10.0, lam=lam)
    curve = landscape.init_spread_curve(spec, data, OptConfig(method="proxgd", max_iter=400), n_inits=4, seed=0)
    ks = np.arange(curve.size)
    keep = curve > 1e-12
    slope = np.polyfit(ks[keep], np.log(curve[keep]), 1)[0]
    assert slope < 0 and curve[-1] < 1e-3 * curve[0]


def test_report_json_schema():
    orc = gmm_population()
    pts = landscape.find_critical_points(orc.objective(), np.zeros(2), 3.5, n_starts=10)
    report = landscape.LandscapeReport(
        critical_points=pts,
        pairing=landscape.match_critical_points(pts, pts),
        constants={"eps0": 0.5},
        certificate=landscape.certify_strong_morse(orc.objective(), np.zeros(2), 1.0, GridSpec(per_axis=5), 0.1, 0.1),
    )
    out = json.loads(report.to_json())
    assert out["schema"] == landscape.SCHEMA_VERSION
    assert set(out) >= {"criticalpoints", "pairing", "constants", "certificate"}
    assert len(out["criticalpoints"]) == len(pts)

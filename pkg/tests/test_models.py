import math

import numpy as np
import pytest

from riskscape import datagen, models
from riskscape.core import fd_gradient, fd_hessian
from riskscape.errors import InvalidInput

GRID = np.linspace(-10, 10, 401)


@pytest.mark.parametrize("act", list(models.ACTIVATIONS.values()), ids=lambda a: a.name)
def test_activation_derivatives(act):
    h = 1e-5
    for f, df in ((act.value, act.first), (act.first, act.second), (act.second, act.third)):
        fd = (f(GRID + h) - f(GRID - h)) / (2 * h)
        np.testing.assert_allclose(df(GRID), fd, atol=1e-6)
    v = act.value(GRID)
    assert np.all(np.diff(v) >= 0) and v.min() >= 0 and v.max() <= 1


def test_logistic_no_overflow():
    with np.errstate(all="raise"):
        v = models.LOGISTIC.value(np.array([-800.0, 800.0]))
    np.testing.assert_array_equal(v, [0.0, 1.0])


@pytest.mark.parametrize("loss", [models.tukey(), models.huber(), models.square_loss()], ids=lambda l: l.name)
def test_loss_derivatives_and_oddness(loss):
    grid = np.linspace(-8, 8, 801)
    h = 1e-6
    np.testing.assert_allclose(loss.psi(-grid), -loss.psi(grid), atol=1e-12)
    np.testing.assert_allclose(loss.psi(grid), (loss.rho(grid + h) - loss.rho(grid - h)) / (2 * h), atol=1e-6)
    away = grid[np.all(np.abs(grid[:, None] - np.array(loss.breakpoints or [99])[None, :]) > 1e-3, axis=1)]
    np.testing.assert_allclose(loss.psi_prime(away), (loss.psi(away + h) - loss.psi(away - h)) / (2 * h), atol=1e-6)
    np.testing.assert_allclose(loss.psi_second(away), (loss.psi_prime(away + h) - loss.psi_prime(away - h)) / (2 * h),
                               atol=1e-5)


def test_tukey_values():
    t = models.tukey()
    assert t.t0 == 4.685
    assert t.rho(0.0) == 0
    np.testing.assert_array_equal(t.rho(np.array([4.685, -5.0, 100.0])), [1, 1, 1])
    assert t.rho(2.0) == pytest.approx(1 - (1 - (2 / 4.685) ** 2) ** 3)
    with pytest.raises(InvalidInput):
        models.make_loss("cauchy")


def test_huber_constant():
    h = models.huber()
    assert h.t0 == 1.345
    assert h.rho(3.0) == pytest.approx(1.345 * 3 - 0.5 * 1.345**2)


def _instance(family, d, n, seed, **kw):
    data, truth = datagen.generate(datagen.GenConfig(family, n=n, d=d, seed=seed, **kw))
    return data, truth


def test_classification_risk_at_zero_is_quarter():
    data, _ = _instance("classification", 4, 37, 0, theta0_norm=2.0)
    spec = models.ModelSpec("classification")
    assert models.risk(spec, data, np.zeros(4)) == 0.25


def test_regression_noiseless_risk_zero():
    data, theta0 = _instance("robust-regression", 3, 20, 1, noise="none")
    assert models.risk(models.ModelSpec("robust-regression"), data, theta0) == pytest.approx(0.0, abs=1e-25)


def test_gmm_collapse_to_single_gaussian(rng):
    z = rng.standard_normal((50, 1)) + 0.4
    data = models.Dataset(z, family="gmm2")
    m = 0.7
    got = models.risk(models.ModelSpec("gmm2"), data, np.array([m, m]))
    direct = np.mean((z[:, 0] - m) ** 2 / 2) + 0.5 * math.log(2 * math.pi)
    assert got == pytest.approx(direct, abs=1e-13)


def test_gmm_equal_components_posterior_and_hessian(rng):
    z = rng.standard_normal((30, 2))
    t = np.array([0.3, -0.2])
    np.testing.assert_array_equal(models.posterior(z, t, t), np.full(30, 0.5))
    # at theta1 = theta2 the cross weight p1 p2 is exactly 1/4
    h = models.gmm_hessian_terms(z, t, t)
    c = np.hstack([z - t, t - z])
    expect = -0.25 * (c.T @ c) / 30
    expect[np.arange(4), np.arange(4)] += 0.5
    np.testing.assert_allclose(h, expect, atol=1e-15)


def test_population_stationarity_of_truth_empirically():
    for fam in ("classification", "robust-regression"):
        spec = models.ModelSpec(fam)
        for seed in range(5):
            data, theta0 = _instance(fam, 5, 4000, seed)
            assert np.linalg.norm(models.gradient(spec, data, theta0)) <= 5 * math.sqrt(5 / 4000)


def test_huber_hessian_inside_quadratic_zone(rng):
    x = rng.standard_normal((40, 3))
    theta = rng.standard_normal(3)
    y = x @ theta + 0.01 * rng.standard_normal(40)
    data = models.Dataset(x, y, "robust-regression")
    spec = models.ModelSpec("robust-regression", loss=models.huber())
    np.testing.assert_allclose(models.hessian(spec, data, theta), x.T @ x / 40, atol=1e-15)


def test_classification_handcrafted_hessian():
    x = np.array([[1.0, -0.5], [0.3, 2.0], [-1.2, 0.7]])
    data = models.Dataset(x, np.array([1.0, 0.0, 1.0]), "classification")
    spec = models.ModelSpec("classification")
    theta = np.array([0.4, -0.3])
    fd = fd_hessian(lambda t: models.risk(spec, data, t), theta)
    np.testing.assert_allclose(models.hessian(spec, data, theta), fd, atol=1e-7)


@pytest.mark.parametrize("family", models.FAMILIES)
def test_derivatives_match_finite_differences(family, rng):
    for trial in range(10):
        d = int(rng.integers(1, 8))
        data, _ = _instance(family, d, int(rng.integers(5, 40)), trial)
        spec = models.ModelSpec(family)
        theta = rng.standard_normal(models.param_dim(family, d))
        f = lambda t: models.risk(spec, data, t)
        g = models.gradient(spec, data, theta)
        fdg = fd_gradient(f, theta)
        assert np.linalg.norm(g - fdg) <= 1e-5 * max(np.linalg.norm(g), 1e-8) + 1e-9
        h = models.hessian(spec, data, theta)
        fdh = fd_hessian(f, theta)
        assert np.linalg.norm(h - fdh, 2) <= 1e-4 * max(np.linalg.norm(h, 2), 1e-6) + 1e-7


@pytest.mark.parametrize("family", models.FAMILIES)
def test_per_sample_grads_average_to_gradient(family, rng):
    data, _ = _instance(family, 3, 25, 2)
    spec = models.ModelSpec(family)
    theta = rng.standard_normal(models.param_dim(family, 3))
    g = models.gradient(spec, data, theta)
    np.testing.assert_allclose(models.per_sample_grads(spec, data, theta).mean(axis=0), g, atol=1e-12)
    one = data.subset(slice(0, 1))
    np.testing.assert_allclose(models.per_sample_grad(spec, one, 0, theta), models.gradient(spec, one, theta),
                               atol=1e-15)
    with pytest.raises(InvalidInput):
        models.per_sample_grad(spec, data, 25, theta)
    val, grad = models.value_and_gradient(spec, data, theta)
    assert val == models.risk(spec, data, theta)
    np.testing.assert_allclose(grad, g, atol=1e-15)


def test_zero_residual_sample_has_zero_gradient():
    # a label equal to sigma(<theta, x>) needs sigma = 0 or 1; use a saturated margin
    x = np.array([[800.0, 0.0]])
    data = models.Dataset(x, np.array([1.0]), "classification")
    g = models.per_sample_grad(models.ModelSpec("classification"), data, 0, np.array([1.0, 0.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_gmm_exchange_symmetry(rng):
    data, _ = _instance("gmm2", 3, 60, 4)
    spec = models.ModelSpec("gmm2")
    theta = rng.standard_normal(6)
    sw = models.swap(theta)
    assert models.risk(spec, data, theta) == models.risk(spec, data, sw)
    np.testing.assert_array_equal(models.gradient(spec, data, sw), models.swap(models.gradient(spec, data, theta)))


def test_risk_bounds(rng):
    data, _ = _instance("classification", 3, 50, 0)
    rdata, _ = _instance("robust-regression", 3, 50, 0, noise="contaminated", contamination=0.3, outlier_var=400)
    for _ in range(20):
        t = 5 * rng.standard_normal(3)
        assert 0 <= models.risk(models.ModelSpec("classification"), data, t) <= 1
        assert 0 <= models.risk(models.ModelSpec("robust-regression"), rdata, t) <= 1


def test_validation_errors():
    data, _ = _instance("classification", 3, 10, 0)
    spec = models.ModelSpec("classification")
    with pytest.raises(InvalidInput):
        models.risk(spec, data, np.zeros(4))
    with pytest.raises(InvalidInput):
        models.risk(models.ModelSpec("robust-regression"), data, np.zeros(3))
    with pytest.raises(InvalidInput):
        models.gradient(spec, data, np.array([np.nan, 0, 0]))
    with pytest.raises(InvalidInput):
        models.ModelSpec("classification", radius=3.0, theta0=np.array([2.0, 0.0]))
    models.ModelSpec("classification", radius=3.0, lam=0.1, theta0=np.array([1.5, 0.0]))
    with pytest.raises(InvalidInput):
        models.ModelSpec("poisson")
    with pytest.raises(InvalidInput):
        models.Dataset(np.ones((3, 2)), np.array([0.0, 2.0, 1.0]), "classification")
    with pytest.raises(InvalidInput):
        models.Dataset(np.ones((3, 2)), np.ones(3), "gmm2")
    empty = models.Dataset(np.zeros((0, 2)), np.zeros(0), "classification")
    with pytest.raises(InvalidInput):
        models.risk(spec, empty, np.zeros(2))

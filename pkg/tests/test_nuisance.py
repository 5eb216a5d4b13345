import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.special import expit, logit

from drsurv.nuisance.design import DesignSpec, main_terms, rich_terms
from drsurv.nuisance.glm import GlmFit, bernoulli_deviance, fit_logistic
from drsurv.nuisance.lasso import fit_logistic_l1, lambda_max, lasso_path
from drsurv.nuisance.learners import (
    FittedLearner,
    LearnerSpec,
    NuisanceFit,
    NuisanceModels,
    fit_nuisance,
    predict_nuisance,
)
from drsurv.simlab import draw_dataset, scenario_learners

# six-point dataset used for the likelihood oracles
X6 = np.array([-1.5, -0.5, 0.0, 0.4, 1.0, 2.0])
Y6 = np.array([0, 1, 0, 1, 0, 1], dtype=float)


def loglik(beta, x, y, offset=0.0):
    eta = offset + beta * x
    return np.sum(y * eta - np.logaddexp(0.0, eta))


def grid_argmax(fn, lo=-10.0, hi=10.0, step=1e-4):
    grid = np.arange(lo, hi + step / 2, step)
    vals = np.array([fn(b) for b in grid])
    return grid[np.argmax(vals)]


def test_intercept_only_mle():
    y = np.array([1, 0, 0, 1, 1, 1, 0, 1], dtype=float)
    fit = fit_logistic(y, None)
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(logit(y.mean()), abs=1e-10)


def test_no_free_columns_is_a_no_op():
    p = np.array([0.2, 0.7, 0.5])
    fit = fit_logistic([0, 1, 1], np.zeros((3, 0)), offset=logit(p), intercept=False)
    assert fit.coefficients.size == 0
    assert np.allclose(fit.predict(np.zeros((3, 0)), offset=logit(p)), p)


def test_single_covariate_matches_grid_search():
    fit = fit_logistic(Y6, X6[:, None], intercept=False)
    oracle = grid_argmax(lambda b: loglik(b, X6, Y6))
    assert abs(fit.coefficients[0] - oracle) <= 1e-4


def test_offset_fit_matches_grid_search():
    off = np.array([0.3, -0.2, 0.1, 0.0, -0.4, 0.2])
    fit = fit_logistic(Y6, X6[:, None], offset=off, intercept=False)
    oracle = grid_argmax(lambda b: loglik(b, X6, Y6, off))
    assert abs(fit.coefficients[0] - oracle) <= 1e-4


def test_score_equations_at_convergence():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(400, 4))
    wts = rng.uniform(0.5, 2.0, 400)
    y = (rng.random(400) < expit(x @ [0.5, -1, 0.2, 0.0] + 0.3)).astype(float)
    fit = fit_logistic(y, x, weights=wts)
    xd = np.column_stack([np.ones(400), x])
    score = xd.T @ (wts * (y - fit.predict(x)))
    assert fit.converged
    assert np.max(np.abs(score)) <= 1e-6


def test_separation_is_flagged_not_raised():
    x = np.array([-2.0, -1.0, 1.0, 2.0])[:, None]
    fit = fit_logistic([0, 0, 1, 1], x)
    assert not fit.converged
    assert np.all(np.isfinite(fit.coefficients))


def test_glm_fit_dict_round_trip():
    fit = fit_logistic(Y6, X6[:, None])
    back = GlmFit.from_dict(fit.to_dict())
    assert np.array_equal(back.coefficients, fit.coefficients) and back.intercept == fit.intercept


def test_lasso_full_shrinkage():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 5))
    y = (rng.random(200) < 0.3).astype(float)
    fit = fit_logistic_l1(y, x, lambda_grid=[1e3])
    assert np.all(fit.slope == 0.0)
    assert fit.intercept_value == pytest.approx(logit(y.mean()), abs=1e-8)


def test_lasso_zero_penalty_matches_glm():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(300, 3))
    y = (rng.random(300) < expit(x @ [1.0, -0.5, 0.25])).astype(float)
    l1 = fit_logistic_l1(y, x, lambda_grid=[0.0])
    ml = fit_logistic(y, x)
    assert np.max(np.abs(l1.coefficients - ml.coefficients)) <= 1e-4


def _soft_threshold_oracle(x, y, lam):
    """Penalized root of the one-covariate, no-intercept logistic problem."""
    n = y.size

    def score(b):
        return np.sum(x * (y - expit(b * x))) / n

    s0 = score(0.0)
    if abs(s0) <= lam:
        return 0.0
    sign = np.sign(s0)
    return brentq(lambda b: score(b) - sign * lam, 0.0, sign * 50.0, xtol=1e-14)


@pytest.mark.parametrize("lam", [0.01, 0.05, 0.5])
def test_lasso_soft_threshold_case(lam):
    rng = np.random.default_rng(7)
    x = rng.normal(size=400)
    x /= np.sqrt(np.mean(x * x))
    y = (rng.random(400) < expit(0.8 * x)).astype(float)
    fit = fit_logistic_l1(y, x[:, None], lambda_grid=[lam], intercept=False, standardize=False, tol=1e-12)
    assert abs(fit.coefficients[0] - _soft_threshold_oracle(x, y, lam)) <= 1e-6


def test_lasso_kkt_conditions():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(500, 12))
    y = (rng.random(500) < expit(x[:, 0] - 0.7 * x[:, 1] + 0.3 * x[:, 2])).astype(float)
    lam = 0.2 * lambda_max(y, x, standardize=False)
    path = lasso_path(y, x, [lam], standardize=False, tol=1e-12)
    beta, b0 = path["coef"][0], path["intercept"][0]
    grad = x.T @ (y - expit(b0 + x @ beta)) / y.size
    active = beta != 0
    assert np.all(np.abs(grad[~active]) <= lam + 1e-6)
    assert np.allclose(grad[active], lam * np.sign(beta[active]), atol=1e-6)
    assert abs(np.mean(y - expit(b0 + x @ beta))) <= 1e-6


def test_lasso_degenerate_column(caplog):
    rng = np.random.default_rng(2)
    x = np.column_stack([rng.normal(size=100), np.full(100, 3.0)])
    y = (rng.random(100) < expit(x[:, 0])).astype(float)
    with caplog.at_level(logging.WARNING):
        fit = fit_logistic_l1(y, x, folds=3)
    assert fit.slope[1] == 0.0
    assert "degenerate" in caplog.text


def test_lasso_cv_picks_from_grid_and_is_seeded():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(300, 20))
    y = (rng.random(300) < expit(x[:, 0])).astype(float)
    a = fit_logistic_l1(y, x, seed=4)
    b = fit_logistic_l1(y, x, seed=4)
    assert np.array_equal(a.coefficients, b.coefficients)
    assert a.regularization[1] in a.info["lambdas"]
    assert a.slope[0] > 0 and np.sum(a.slope != 0) < 20


def test_design_terms_and_duplicates():
    spec = DesignSpec(("w1", "sqrt(w2)", "cos(w1)", "w1:w2", "a", "t=2"))
    m = spec.matrix(np.array([[1.0, -4.0]]), t=2, a=1)
    assert np.allclose(m, [[1.0, 2.0, np.cos(1.0), -4.0, 1.0, 1.0]])
    with pytest.raises(ValueError):
        DesignSpec(("w1:w2", "w2:w1"))
    assert len(rich_terms(10)) == 30 + 30 * 29 // 2
    assert main_terms(3) == ("w1", "w2", "w3")


def _fixed_models(coef):
    spec = LearnerSpec(DesignSpec(("w1",)), "glm")
    learner = FittedLearner(spec, {None: GlmFit(np.array([coef, 0.0]), True, True, 0)})
    return NuisanceModels(learner, learner, learner)


def test_predict_nuisance_zero_coefficients():
    ds = draw_dataset(60, 1)
    nf = predict_nuisance(ds, _fixed_models(0.0), (0.01, 0.99))
    for arr in (nf.g_a, nf.g_r, nf.h):
        assert np.all(arr == 0.5)


def test_predict_nuisance_clips_to_upper_bound():
    ds = draw_dataset(60, 1)
    nf = predict_nuisance(ds, _fixed_models(40.0), (0.01, 0.99))
    assert np.all(nf.h == 0.99) and np.all(nf.g_a == 0.99)


@settings(max_examples=30, deadline=None)
@given(st.floats(-8, 8), st.floats(0.001, 0.2), st.floats(0.8, 0.999))
def test_clipping_invariant(coef, lo, hi):
    ds = draw_dataset(50, 2)
    nf = predict_nuisance(ds, _fixed_models(coef), (lo, hi))
    for arr in (nf.g_a, nf.g_r, nf.h):
        assert np.all((arr >= lo) & (arr <= hi))
    wide = predict_nuisance(ds, _fixed_models(coef), (1e-12, 1 - 1e-12))
    inside = (wide.h > lo) & (wide.h < hi)
    assert np.array_equal(wide.h[inside], nf.h[inside])


def test_models_json_round_trip():
    ds = draw_dataset(300, 4)
    models = fit_nuisance(ds, *scenario_learners("b"), seed=0)
    back = NuisanceModels.from_json(models.to_json())
    a = predict_nuisance(ds, models)
    b = predict_nuisance(ds, back)
    assert np.array_equal(a.h, b.h) and np.array_equal(a.g_r, b.g_r)


def test_nuisance_fit_products():
    nf = NuisanceFit(np.full(2, 0.5), np.full((2, 2), 0.1), np.array([[0.5, 0.5], [0.0, 0.0]]), (0.0, 1.0))
    assert np.allclose(nf.survival()[0], [1.0, 0.5, 0.25])
    assert np.allclose(nf.survival()[1], 1.0)
    assert np.allclose(nf.censoring()[0], [1.0, 0.9, 0.81])
    assert np.allclose(nf.survival_ratio()[0], [0.25, 0.5, 1.0])


def _mean_abs_error(n, seed):
    from drsurv.simlab import h0, latent

    ds = draw_dataset(n, seed)
    models = fit_nuisance(ds, *scenario_learners("a"), seed=0)
    fresh = draw_dataset(4000, seed + 1000)
    nf = predict_nuisance(fresh, models, (1e-6, 1 - 1e-6))
    u1, _ = latent(fresh.w)
    truth = np.column_stack([h0(t, 1, u1) for t in range(1, fresh.tau + 1)])
    return float(np.mean(np.abs(nf.h - truth)))


@pytest.mark.slow
def test_rich_hazard_error_decreases_with_n():
    small = np.mean([_mean_abs_error(400, s) for s in (1, 2)])
    large = np.mean([_mean_abs_error(2500, s) for s in (1, 2)])
    assert large < small


def test_deviance_matches_definition():
    eta = np.array([0.3, -1.0, 2.0])
    y = np.array([1.0, 0.0, 1.0])
    p = expit(eta)
    ref = -2 * np.sum(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert bernoulli_deviance(y, eta) == pytest.approx(ref, rel=1e-12)

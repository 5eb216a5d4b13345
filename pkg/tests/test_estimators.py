import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logit

from drsurv.estimators import (
    EstimateReport,
    FoldPlan,
    HCovariates,
    aipw,
    cf_dtmle,
    drift_plugin,
    dtmle,
    eif_evaluate,
    h_covariates,
    ipw,
    kaplan_meier,
    score_components,
    stopping_tolerance,
    survival_products,
    telescoping_terms,
    tilt_step,
    tmle_classic,
    wald_interval,
    z_quantile,
)
from drsurv.nuisance.learners import NuisanceFit, fit_nuisance, predict_nuisance
from drsurv.simlab import draw_dataset, scenario_learners
from drsurv.smoothing import AuxiliaryFit, build_auxiliary
from drsurv.survdata import SurvivalDataset, indicators


def loop_products(h, g_r):
    n, tau = h.shape
    S = np.ones((n, tau + 1))
    G = np.ones((n, tau + 1))
    for i in range(n):
        for t in range(1, tau + 1):
            S[i, t] = S[i, t - 1] * (1 - h[i, t - 1])
            G[i, t] = G[i, t - 1] * (1 - g_r[i, t - 1])
    return S, G


def test_survival_products_match_loops():
    rng = np.random.default_rng(0)
    h, g_r = rng.uniform(0, 1, (20, 7)), rng.uniform(0, 1, (20, 7))
    S, G = survival_products(NuisanceFit(rng.uniform(0.1, 1, 20), g_r, h, (0.0, 1.0)))
    S0, G0 = loop_products(h, g_r)
    assert np.max(np.abs(S - S0)) <= 1e-14 and np.max(np.abs(G - G0)) <= 1e-14


def test_survival_products_simple_cases():
    nf = NuisanceFit(np.ones(1), np.zeros((1, 2)), np.full((1, 2), 0.5), (0.0, 1.0))
    assert survival_products(nf)[0][0, 2] == 0.25
    nf = NuisanceFit(np.ones(1), np.zeros((1, 3)), np.zeros((1, 3)), (0.0, 1.0))
    assert np.all(survival_products(nf)[0] == 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_telescoping_identity(m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, m), rng.uniform(0, 1, m)
    lhs = np.prod(1 - a) - np.prod(1 - b)
    assert abs(lhs - telescoping_terms(a, b).sum()) <= 1e-12


# three subjects, tau = 2: an event at 1, a censoring at 2 and an untreated one
DS3 = SurvivalDataset([[0.0], [1.0], [2.0]], [1, 1, 0], [1, 0, 1], [1, 2, 2], 2, 2)
NF3 = NuisanceFit(
    np.array([0.6, 0.5, 0.7]),
    np.array([[0.1, 0.2], [0.05, 0.1], [0.3, 0.3]]),
    np.array([[0.2, 0.3], [0.1, 0.4], [0.5, 0.5]]),
    (0.0, 1.0),
)


def test_eif_hand_example():
    theta = 0.4
    d0 = -(0.7 / (0.6 * 0.9)) * (1 - 0.2) + 0.8 * 0.7 - theta
    d1 = -((0.6 / (0.5 * 0.95)) * (0 - 0.1) + (1 / (0.5 * 0.95 * 0.9)) * (0 - 0.4)) + 0.9 * 0.6 - theta
    d2 = 0.5 * 0.5 - theta
    assert np.max(np.abs(eif_evaluate(DS3, NF3, theta) - [d0, d1, d2])) <= 1e-12


def test_eif_untreated_subject_is_plugin_residual():
    assert eif_evaluate(DS3, NF3, 0.1)[2] == pytest.approx(0.25 - 0.1, abs=1e-15)


def random_instance(seed, n=40, tau=3):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, tau + 1, n)
    delta = (rng.random(n) < 0.6).astype(int) * (t > 0)
    ds = SurvivalDataset(rng.normal(size=(n, 2)), rng.integers(0, 2, n), delta, t, tau, tau)
    nf = NuisanceFit(
        rng.uniform(0.05, 0.95, n), rng.uniform(0, 0.4, (n, tau)), rng.uniform(0.01, 0.9, (n, tau)), (0.0, 1.0)
    )
    return ds, nf


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_aipw_solves_the_equation(seed):
    ds, nf = random_instance(seed)
    rep = aipw(ds, nf)
    assert abs(np.mean(eif_evaluate(ds, nf, rep.theta))) <= 1e-12
    assert abs(np.mean(rep.influence)) <= 1e-10


def test_aipw_empirical_survival_when_hazard_is_observed():
    # all treated, no censoring before tau: observed hazard gives the empirical fraction
    ds = SurvivalDataset(np.zeros((5, 1)), [1] * 5, [1, 1, 0, 0, 1], [1, 2, 2, 2, 2], 2, 2)
    h = np.tile([1 / 5, 2 / 4], (5, 1))
    nf = NuisanceFit(np.ones(5), np.zeros((5, 2)), h, (0.0, 1.0))
    assert aipw(ds, nf).theta == pytest.approx(2 / 5, abs=1e-12)
    assert tmle_classic(ds, nf).theta == pytest.approx(2 / 5, abs=1e-12)


def test_km_examples():
    ds = SurvivalDataset(np.zeros((3, 1)), [1, 1, 1], [1, 0, 1], [1, 2, 3], 3, 3)
    assert kaplan_meier(ds).theta == 0.0
    ds = SurvivalDataset(np.zeros((4, 1)), [1] * 4, [0] * 4, [3] * 4, 3, 3)
    assert kaplan_meier(ds).theta == 1.0
    ds = SurvivalDataset(np.zeros((5, 1)), [1] * 5, [1, 1, 0, 0, 1], [1, 2, 3, 3, 3], 3, 2)
    assert kaplan_meier(ds).theta == pytest.approx(3 / 5)


def test_km_empty_risk_set_is_flagged():
    ds = SurvivalDataset(np.zeros((2, 1)), [1, 1], [0, 0], [1, 1], 3, 3)
    rep = kaplan_meier(ds)
    assert rep.theta == 1.0 and rep.diagnostics["empty_risk_set"]


def test_ipw_horvitz_thompson():
    ds = SurvivalDataset(np.zeros((4, 1)), [1, 1, 0, 1], [1, 0, 0, 0], [1, 2, 2, 2], 2, 2)
    g = 3 / 4
    nf = NuisanceFit(np.full(4, g), np.zeros((4, 2)), np.full((4, 2), 0.3), (0.0, 1.0))
    rep = ipw(ds, nf)
    assert rep.theta == pytest.approx(np.mean([0, 1, 0, 1]) / g, abs=1e-12)


def test_ipw_full_treatment_is_empirical_survival():
    ds = SurvivalDataset(np.zeros((5, 1)), [1] * 5, [1, 0, 1, 0, 0], [1, 2, 2, 2, 2], 2, 2)
    nf = NuisanceFit(np.ones(5), np.zeros((5, 2)), np.full((5, 2), 0.3), (0.0, 1.0))
    assert ipw(ds, nf).theta == pytest.approx(3 / 5, abs=1e-12)


def aux_constants(n, tau, **vals):
    base = dict(e_a=0.0, q=0.5, m=1.0, e_r=0.0, e_l=0.0, c_h=1.0, g_g=1.0)
    base.update({k: v for k, v in vals.items() if k in base})
    shapes = dict(e_a=(n,), q=(n,), m=(n,), e_r=(n, tau), e_l=(n, tau + 1), c_h=(n, tau + 1), g_g=(n, tau + 1))
    out = {k: np.full(shapes[k], float(v)) for k, v in base.items()}
    cube = (n, tau + 1, tau + 1)
    for k in ("d", "b", "u", "v", "D", "B", "U", "V"):
        out[k] = np.full(cube, float(vals.get(k, 0.0 if k.islower() else 1.0)))
    return AuxiliaryFit(**out)


def test_h_covariates_tau_one_by_hand():
    g_a, g_r0 = 0.6, 0.2
    nf = NuisanceFit(np.full(2, g_a), np.full((2, 1), g_r0), np.full((2, 1), 0.3), (0.0, 1.0))
    e_l, e_r, e_a, q, u, d = 0.15, -0.1, 0.05, 0.4, 0.25, 0.3
    aux = aux_constants(2, 1, e_l=e_l, e_r=e_r, e_a=e_a, q=q, u=u, d=d, U=1 - u, D=1 - d)
    H = h_covariates(nf, aux)
    assert np.allclose(H.h_a, (1 - u) / (1 - g_r0) / g_a * e_l, rtol=0, atol=1e-12)
    assert np.allclose(H.h_r[:, 0], (1 - u) / (1 - g_r0) / (g_a * (1 - g_r0)) * e_l, rtol=0, atol=1e-12)
    assert np.allclose(H.h_l[:, 0], e_r / (1 - d) + e_a / (q * (1 - d)), rtol=0, atol=1e-12)
    assert np.allclose(H.z[:, 0], 1 / (g_a * (1 - g_r0)), rtol=0, atol=1e-12)


def test_h_covariates_linearity():
    ds, nf = random_instance(3, n=30, tau=4)
    aux = build_auxiliary(ds, nf)
    zero_l = AuxiliaryFit(**{**aux.__dict__, "e_l": np.zeros_like(aux.e_l)})
    H = h_covariates(nf, zero_l)
    assert np.all(H.h_a == 0) and np.all(H.h_r == 0)
    zero_ra = AuxiliaryFit(**{**aux.__dict__, "e_r": np.zeros_like(aux.e_r), "e_a": np.zeros_like(aux.e_a)})
    assert np.all(h_covariates(nf, zero_ra).h_l == 0)
    H0 = h_covariates(nf, AuxiliaryFit(**{**zero_l.__dict__, "e_r": zero_ra.e_r, "e_a": zero_ra.e_a}))
    assert drift_plugin(ds, nf, H0) == 0.0


# ten subjects with a one-covariate treatment tilt
A10 = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 1])
G10 = np.array([0.3, 0.6, 0.5, 0.7, 0.4, 0.2, 0.8, 0.5, 0.6, 0.4])
X10 = np.array([0.5, -1.0, 0.2, 1.5, -0.3, 0.9, -0.7, 1.1, 0.4, -1.2])


def _ten(g=G10, a=A10):
    ds = SurvivalDataset(np.zeros((10, 1)), a, [0] * 10, [1] * 10, 1, 1)
    nf = NuisanceFit(g, np.full((10, 1), 0.1), np.full((10, 1), 0.2), (0.0, 1.0))
    return ds, nf


def test_tilt_matches_grid_search():
    ds, nf = _ten()
    coef, new, status = tilt_step(ds, nf, HCovariates(X10, None, None, None))
    grid = np.arange(-10, 10 + 5e-5, 1e-4)
    p = expit(logit(G10)[None, :] + grid[:, None] * X10[None, :])
    ll = np.sum(A10 * np.log(p) + (1 - A10) * np.log(1 - p), axis=1)
    assert status["a"] == "ok"
    assert abs(coef.eps_a - grid[np.argmax(ll)]) <= 1e-4
    assert np.allclose(new.g_a, expit(logit(G10) + coef.eps_a * X10))


def test_zero_covariate_gives_zero_tilt():
    ds, nf = _ten()
    coef, new, status = tilt_step(ds, nf, HCovariates(np.zeros(10), None, None, None))
    assert coef.eps_a == 0.0 and status["a"] == "degenerate"
    assert np.array_equal(new.g_a, nf.g_a)


def test_orthogonal_residuals_give_zero_tilt():
    a = np.array([1, 0] * 5)
    x = np.array([1.0, 1.0, 2.0, 2.0, -1.0, -1.0, 0.5, 0.5, 3.0, 3.0])
    ds, nf = _ten(np.full(10, 0.5), a)
    coef, _, _ = tilt_step(ds, nf, HCovariates(x, None, None, None))
    assert abs(coef.eps_a) <= 1e-6


def test_stopping_tolerance():
    assert stopping_tolerance(400) == pytest.approx(2.746e-6, rel=1e-3)


@pytest.fixture(scope="module")
def sim_fit():
    ds = draw_dataset(400, 11)
    nf = predict_nuisance(ds, fit_nuisance(ds, *scenario_learners("a"), seed=0))
    return ds, nf


def test_dtmle_solves_its_equations(sim_fit):
    ds, nf = sim_fit
    rep = dtmle(ds, nf)
    bound = 1e-3 / np.sqrt(ds.n)
    assert rep.converged and 0.0 <= rep.theta <= 1.0
    assert abs(rep.diagnostics["mean_eif"]) <= bound
    assert max(abs(v) for v in rep.diagnostics["mean_scores"]) <= bound
    assert abs(np.mean(rep.influence)) <= 1e-10
    assert rep.se == pytest.approx(np.sqrt(rep.sigma2 / rep.n))
    assert rep.ci[0] <= rep.theta <= rep.ci[1]


def test_tmle_solves_eif_equation(sim_fit):
    ds, nf = sim_fit
    rep = tmle_classic(ds, nf)
    assert rep.converged and 0.0 <= rep.theta <= 1.0
    assert abs(rep.diagnostics["mean_eif"]) <= 1e-3 / np.sqrt(ds.n)


def test_drift_is_recorded_per_iteration(sim_fit):
    ds, nf = sim_fit
    rep = dtmle(ds, nf)
    trace = rep.diagnostics["trace"]
    assert len(trace) == rep.iterations
    assert all(len(rec["eps"]) == 4 for rec in trace)


def test_refresh_mode_is_validated(sim_fit):
    ds, nf = sim_fit
    with pytest.raises(ValueError):
        dtmle(ds, nf, refresh="sometimes")


def test_determinism(sim_fit):
    ds, nf = sim_fit
    assert dtmle(ds, nf).to_json(True) == dtmle(ds, nf).to_json(True)


def test_report_round_trip(sim_fit):
    ds, nf = sim_fit
    rep = dtmle(ds, nf, max_iter=3)
    back = EstimateReport.from_json(rep.to_json(include_influence=True))
    assert back.theta == rep.theta and back.se == rep.se and back.iterations == rep.iterations
    assert np.array_equal(back.influence, rep.influence)
    assert json.loads(rep.to_json())["diagnostics"]["trace"][0]["iteration"] == 1


def test_fold_plan_invariants():
    plan = FoldPlan.random(103, 10, seed=4)
    sizes = [f.size for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1
    assert np.array_equal(np.sort(np.concatenate(plan.folds)), np.arange(103))
    again = FoldPlan.random(103, 10, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))
    with pytest.raises(ValueError):
        FoldPlan.from_folds([[0, 1], [1, 2]])
    with pytest.raises(ValueError):
        FoldPlan.random(5, 1)


def test_crossfit_on_duplicated_data_equals_full_sample():
    ds = draw_dataset(300, 21)
    n = ds.n
    both = ds.subset(np.concatenate([np.arange(n), np.arange(n)]))
    plan = FoldPlan.from_folds([np.arange(n), np.arange(n, 2 * n)])
    learners = scenario_learners("b")
    tol = stopping_tolerance(n)
    cf = cf_dtmle(both, learners, plan, seed=3, tol=tol, max_iter=20)
    nf = predict_nuisance(ds, fit_nuisance(ds, *learners, seed=3))
    ref = dtmle(ds, nf, tol=tol, max_iter=20)
    assert cf.iterations == ref.iterations
    assert abs(cf.theta - ref.theta) <= 1e-10


def test_crossfit_small_fold_is_named():
    ds = draw_dataset(60, 2)
    plan = FoldPlan.from_folds([np.arange(5), np.arange(5, 60)])
    with pytest.raises(ValueError, match="fold 1"):
        cf_dtmle(ds, scenario_learners("b"), plan)


def test_score_components_vanish_at_exact_residuals():
    ds, nf = random_instance(5)
    H = HCovariates(np.ones(ds.n), np.ones((ds.n, 3)), np.ones((ds.n, 3)), None)
    d_a, _, _ = score_components(ds, nf, H)
    assert np.allclose(d_a, -(ds.a - nf.g_a))


def test_wald_interval():
    assert z_quantile(0.05) == pytest.approx(1.959963984540054, abs=1e-12)
    lo, hi = wald_interval(0.5, 0.1, 0.1)
    assert hi - 0.5 == pytest.approx(0.1 * 1.6448536269514722)
    with pytest.raises(ValueError):
        z_quantile(1.5)


def test_indicators_used_by_eif_match_dataset():
    ind = indicators(DS3)
    assert ind.i[1, 2] == 1 and ind.l[1, 2] == 0 and ind.i[0, 2] == 0

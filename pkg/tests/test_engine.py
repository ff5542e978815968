import logging
from dataclasses import replace
import numpy as np
import pytest
from engine import (EstimationError, EstimateReport, GFit, LtmleEngine, ArmEstimate, contrast,
                    fit_g, gcomp_arm, learner_from_config, resolve_policy, tmle_arm)
from interventions import fit_stochastic_law, parse_arm
from learners import LearnerSpec
from panel import PanelError
from sim import ToyConfig, enumerate_gformula, enumerate_truth, scenario_presets, simulate_trial
from weights import clever_weights

TOY_ARMS = ["static_a1_z0", "static_a0_z1", "dynamic_a1", "ignore_a0", "stochastic_a1"]


def unit_gfit(K, n):
    gfit = GFit()
    for k in range(1, K + 1):
        gfit.g_obs[("C", k)] = np.ones(n)
    for k in range(K):
        gfit.g_obs[("A", k)] = np.ones(n)
        gfit.g_obs[("Z", k)] = np.ones(n)
    return gfit


@pytest.fixture
def weight_panel(panel_factory):
    # subject 0 follows z=0, subject 1 starts Z at visit 1, subject 2 is censored at visit 1
    C = np.zeros((2, 3), dtype=np.int8)
    C[:, 2] = 1
    return panel_factory(n=3, K=2, A0=np.ones(3, dtype=np.int8), A=np.ones((1, 3), dtype=np.int8),
                         Z=np.array([[0, 1, 0]], dtype=np.int8), C=C)


@pytest.fixture(scope="module")
def toy_panel():
    return simulate_trial(ToyConfig(), 20_000, seed=5)


def toy_arm(name, panel):
    arm = parse_arm(name)
    if arm.z_spec.form == "stochastic":
        arm = arm.with_law(fit_stochastic_law(panel))
    return arm


def test_clever_weight_product(weight_panel):
    gfit = unit_gfit(2, 3)
    gfit.g_obs[("Z", 0)] = np.full(3, 0.8)
    gfit.g_obs[("Z", 1)] = np.full(3, 0.8)
    H = clever_weights(weight_panel, gfit, parse_arm("static_a1_z0"), 2)
    assert H[0] == pytest.approx(1.5625)
    assert H[1] == 0.0
    assert H[2] == 0.0
    assert clever_weights(weight_panel, gfit, parse_arm("static_a1_z0"), 2, weight_cap=1.2)[0] == 1.2


def test_observational_weights_are_risk_indicators(weight_panel):
    H = clever_weights(weight_panel, unit_gfit(2, 3), parse_arm("ignore_a1"), 2)
    assert H.tolist() == [1.0, 1.0, 0.0]
    assert clever_weights(weight_panel, unit_gfit(2, 3), parse_arm("ignore_a0"), 2).tolist() == [0.0, 0.0, 0.0]


def test_positivity_breakdown_raises(weight_panel):
    gfit = unit_gfit(2, 3)
    gfit.g_obs[("Z", 0)] = np.zeros(3)
    with pytest.raises(EstimationError):
        clever_weights(weight_panel, gfit, parse_arm("static_a1_z0"), 1)
    with pytest.raises(EstimationError):
        GFit().prob("C", 1)


def test_randomized_and_uncensored_mechanisms_are_exact(scenario_panel):
    gfit = fit_g(scenario_panel, LearnerSpec("running_avg"), folds=3)
    assert gfit.models[("A", 0)].kind == "constant"
    assert np.all(gfit.prob("A", 0) == 0.5)
    for k in range(1, scenario_panel.K + 1):
        assert np.all(gfit.prob("C", k) == 1.0)
    assert gfit.models[("A", 1)].kind == "carry"
    assert gfit.floored['C1'] == 0


def test_no_events_means_zero_risk_and_zero_eic(scenario_panel):
    panel = replace(scenario_panel, Y=np.zeros_like(scenario_panel.Y))
    gfit = fit_g(panel, LearnerSpec("running_avg"))
    estimate = tmle_arm(panel, gfit, parse_arm("dynamic_a1"), LearnerSpec("running_avg"), 5)
    assert estimate.psi == 0.0
    assert np.all(estimate.eic == 0.0)
    assert gcomp_arm(panel, parse_arm("static_a0_z0"), LearnerSpec("running_avg"), 5).psi == 0.0


@pytest.mark.parametrize("name", ["dynamic_a1", "static_a0_z0", "ignore_a1"])
def test_targeted_estimate_solves_the_eic_equation(scenario_panel, name):
    gfit = fit_g(scenario_panel, LearnerSpec("running_avg"))
    estimate = tmle_arm(scenario_panel, gfit, parse_arm(name), LearnerSpec("running_avg"), 5)
    assert abs(np.mean(estimate.eic)) <= 1e-8
    assert estimate.diagnostics['eic_solved']
    assert estimate.se == pytest.approx(np.sqrt(np.var(estimate.eic, ddof=1) / scenario_panel.n), rel=1e-12)
    assert 0.0 < estimate.psi < 1.0
    assert estimate.se > 0
    assert set(estimate.diagnostics['epsilon']) == {"1", "2", "3", "4", "5"}
    assert len(estimate.diagnostics['support']) == 5


@pytest.mark.parametrize("name", TOY_ARMS)
@pytest.mark.parametrize("horizon", [1, 2])
def test_sequential_regression_matches_enumeration(toy_panel, name, horizon):
    arm = toy_arm(name, toy_panel)
    exact = enumerate_gformula(toy_panel, arm, horizon)
    estimate = gcomp_arm(toy_panel, arm, LearnerSpec("saturated"), horizon)
    assert estimate.psi == pytest.approx(exact, abs=1e-8)


@pytest.mark.parametrize("name", TOY_ARMS)
def test_targeting_is_a_no_op_for_saturated_fits(toy_panel, name):
    arm = toy_arm(name, toy_panel)
    gfit = fit_g(toy_panel, LearnerSpec("saturated"))
    targeted = tmle_arm(toy_panel, gfit, arm, LearnerSpec("saturated"), 2)
    untargeted = gcomp_arm(toy_panel, arm, LearnerSpec("saturated"), 2)
    assert targeted.psi == pytest.approx(untargeted.psi, abs=1e-8)


@pytest.mark.parametrize("name", ["static_a1_z0", "static_a1_z1", "dynamic_a0"])
def test_toy_estimate_is_close_to_truth(toy_panel, name):
    arm = parse_arm(name)
    gfit = fit_g(toy_panel, LearnerSpec("saturated"))
    estimate = tmle_arm(toy_panel, gfit, arm, LearnerSpec("saturated"), 2)
    truth = enumerate_truth(ToyConfig(), arm, 2)
    assert abs(estimate.psi - truth) < 5 * estimate.se + 0.005


def test_identical_arms_give_zero_contrast(scenario_panel):
    gfit = fit_g(scenario_panel, LearnerSpec("running_avg"))
    arm = tmle_arm(scenario_panel, gfit, parse_arm("dynamic_a1"), LearnerSpec("running_avg"), 3)
    report = contrast(arm, arm, name="same")
    assert report.psi == 0.0
    assert report.ci_low == -report.ci_high


def test_contrast_requires_matching_arms(scenario_panel):
    first = gcomp_arm(scenario_panel, parse_arm("dynamic_a1"), LearnerSpec("running_avg"), 3)
    later = gcomp_arm(scenario_panel, parse_arm("dynamic_a0"), LearnerSpec("running_avg"), 4)
    subset = gcomp_arm(scenario_panel.take(np.arange(1000)), parse_arm("dynamic_a0"), LearnerSpec("running_avg"), 3)
    with pytest.raises(ValueError):
        contrast(first, later)
    with pytest.raises(ValueError):
        contrast(first, subset)


def test_engine_reports_contrasts_and_single_arms(scenario_panel, engine_config):
    results = LtmleEngine(config=engine_config).estimate(
        scenario_panel, ["dynamic", "stochastic", "static_a1_z0"], horizon=3)
    assert isinstance(results['dynamic'], EstimateReport)
    assert isinstance(results['static_a1_z0'], ArmEstimate)
    report = results['stochastic'].to_dict()
    assert report['policy'] == "stochastic" and report['estimator'] == "tmle"
    assert report['ci'][0] < report['psi'] < report['ci'][1]
    assert report['risk1'] - report['risk0'] == pytest.approx(report['psi'])


def test_engine_gcomp_has_no_standard_error(scenario_panel, engine_config):
    results = LtmleEngine(config=engine_config).estimate(scenario_panel, ["ignore"], 2, estimator="gcomp")
    assert results['ignore'].se is None
    assert results['ignore'].to_dict()['ci'] is None


def test_engine_logs_through_its_module_logger(scenario_panel, engine_config, caplog):
    with caplog.at_level(logging.INFO, logger="engine"):
        LtmleEngine(config=engine_config).estimate(scenario_panel, ["ignore"], 1, estimator="gcomp")
    assert any(r.name == "engine" and "estimating 1 policies" in r.getMessage() for r in caplog.records)


def test_engine_with_super_learner_records_selection(scenario_panel, engine_config):
    engine_config['learners']['use_super_learner'] = True
    engine = LtmleEngine(config=engine_config)
    assert isinstance(engine.outcome_learner, list)
    assert isinstance(engine.stochastic_learner, LearnerSpec)
    results = engine.estimate(scenario_panel.take(np.arange(1500)), ["ignore"], 2)
    selected = results['ignore'].diagnostics['active']['selected']
    assert set(selected) == {"1", "2"}


def test_engine_rejects_invalid_panels(scenario_panel, engine_config):
    Y = scenario_panel.Y.copy()
    Y[:, 0] = [1, 0, 0, 0, 0]
    with pytest.raises(PanelError):
        LtmleEngine(config=engine_config).estimate(replace(scenario_panel, Y=Y), ["dynamic"], 3)
    with pytest.raises(ValueError):
        LtmleEngine(config=engine_config).estimate(scenario_panel, ["dynamic"], 3, estimator="ipw")


def test_policy_resolution():
    assert resolve_policy("ignore")[0] == "ignore"
    assert [arm.name for arm in resolve_policy({'z_form': "static1"})[1]] == ["static_a1_z1", "static_a0_z1"]
    assert resolve_policy({'a_value': 0, 'z_form': "dynamic"})[0] == "dynamic_a0"
    assert learner_from_config({}, "outcome").features == "running_avg"


def test_unseen_history_is_refused_not_imputed(toy_panel):
    # nobody in the panel takes the concomitant drug at visit 1
    panel = toy_panel.take(np.flatnonzero(toy_panel.node("Z", 1) == 0))
    arm = parse_arm("static_a1_z1")
    with pytest.raises(EstimationError, match="no fitted support"):
        gcomp_arm(panel, arm, LearnerSpec("saturated"), 2)


@pytest.mark.parametrize("name", ["static_a1_z0", "dynamic_a0"])
def test_correct_treatment_model_rescues_intercept_only_outcome_fits(toy_panel, name):
    arm = parse_arm(name)
    gfit = fit_g(toy_panel, LearnerSpec("saturated"))
    estimate = tmle_arm(toy_panel, gfit, arm, LearnerSpec("intercept"), 2)
    truth = enumerate_truth(ToyConfig(), arm, 2)
    assert abs(estimate.psi - truth) < 5 * estimate.se + 0.005


@pytest.mark.parametrize("name", ["static_a1_z0", "dynamic_a0"])
def test_correct_outcome_model_survives_intercept_only_propensities(toy_panel, name):
    arm = parse_arm(name)
    gfit = fit_g(toy_panel, LearnerSpec("intercept"))
    estimate = tmle_arm(toy_panel, gfit, arm, LearnerSpec("saturated"), 2)
    truth = enumerate_truth(ToyConfig(), arm, 2)
    assert abs(estimate.psi - truth) < 5 * estimate.se + 0.005


@pytest.mark.parametrize("name", TOY_ARMS)
def test_risk_does_not_decrease_with_horizon(toy_panel, name):
    arm = toy_arm(name, toy_panel)
    first = gcomp_arm(toy_panel, arm, LearnerSpec("saturated"), 1).psi
    second = gcomp_arm(toy_panel, arm, LearnerSpec("saturated"), 2).psi
    assert second >= first - 1e-12


def test_dynamic_policy_leaves_baseline_use_alone(scenario_panel):
    dynamic = gcomp_arm(scenario_panel, parse_arm("dynamic_a1"), LearnerSpec("running_avg"), 1)
    natural = gcomp_arm(scenario_panel, parse_arm("ignore_a1"), LearnerSpec("running_avg"), 1)
    assert dynamic.psi == natural.psi


def test_concomitant_propensity_recovers_persistence():
    panel = simulate_trial(scenario_presets()['scenario1'], 20_000, seed=12)
    gfit = fit_g(panel, LearnerSpec("main"), folds=3)
    # Z_1 columns: intercept, L0, L1, A0, Z0
    coef = gfit.models[("Z", 1)].coef
    assert coef[4] == pytest.approx(8.0, abs=1.0)
    assert coef[2] == pytest.approx(1.0, abs=0.2)


def test_data_driven_failures_surface_as_estimation_errors(scenario_panel, engine_config, monkeypatch):
    import engine

    def broken(*args, **kwargs):
        raise ValueError("rtol too small")

    monkeypatch.setattr(engine, "fit_intercept_fluctuation", broken)
    with pytest.raises(EstimationError, match="rtol too small"):
        LtmleEngine(config=engine_config).estimate(scenario_panel, ["dynamic"], 2)
    with pytest.raises(ValueError) as info:
        LtmleEngine(config=engine_config).estimate(scenario_panel, ["dynamic"], 9)
    assert not isinstance(info.value, EstimationError)

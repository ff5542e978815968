import numpy as np
import pytest
from scipy.special import expit
from learners import BaseLearner, LearnerSpec, fit_discrete_super_learner, fit_learner
from learners.super_learner import fold_assignment


class BrokenLearner(BaseLearner):
    def __init__(self):
        super().__init__("broken")

    def fit(self, inputs, response, weights=None, offset=None):
        raise ValueError("always fails")


@pytest.fixture
def predictive_data():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2000, 1))
    y = (rng.random(2000) < expit(2.0 * x[:, 0])).astype(float)
    return x, y


def test_fold_assignment_is_seeded_and_balanced():
    a = fold_assignment(103, 10, seed=4)
    assert np.array_equal(a, fold_assignment(103, 10, seed=4))
    assert not np.array_equal(a, fold_assignment(103, 10, seed=5))
    counts = np.bincount(a, minlength=10)
    assert counts.max() - counts.min() <= 1


def test_single_member_library_selects_it(predictive_data):
    x, y = predictive_data
    model = fit_discrete_super_learner([LearnerSpec("main")], x, y, folds=5)
    assert model.report['selected'] == "logistic_main"


def test_predictive_feature_beats_intercept(predictive_data):
    x, y = predictive_data
    model = fit_discrete_super_learner([LearnerSpec("intercept"), LearnerSpec("main")], x, y, folds=5)
    assert model.report['selected'] == "logistic_main"
    risks = [m['cv_risk'] for m in model.report['members']]
    assert risks[1] == min(risks)


def test_selected_risk_is_the_minimum_under_null_truth():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((200, 10))
    y = (rng.random(200) < 0.3).astype(float)
    model = fit_discrete_super_learner([LearnerSpec("intercept"), LearnerSpec("main")], x, y, folds=10)
    risks = [m['cv_risk'] for m in model.report['members']]
    assert risks[model.report['selected_index']] <= min(risks)


def test_ties_go_to_the_earliest_member(predictive_data):
    x, y = predictive_data
    model = fit_discrete_super_learner([LearnerSpec("main"), LearnerSpec("main")], x, y, folds=5)
    assert model.report['selected_index'] == 0


def test_failing_members_are_excluded(predictive_data):
    x, y = predictive_data
    model = fit_discrete_super_learner([BrokenLearner(), LearnerSpec("intercept")], x, y, folds=5)
    assert model.report['selected'] == "logistic_intercept"
    assert model.report['members'][0]['failed_folds'] == 5
    with pytest.raises(ValueError):
        fit_discrete_super_learner([BrokenLearner()], x, y, folds=5)


def test_selection_is_deterministic_for_a_seed(predictive_data):
    x, y = predictive_data
    library = [LearnerSpec("intercept"), LearnerSpec("main"), LearnerSpec("interactions")]
    first = fit_discrete_super_learner(library, x, y, folds=5, seed=9)
    second = fit_discrete_super_learner(library, x, y, folds=5, seed=9)
    assert first.report == second.report
    assert np.array_equal(first.coef, second.coef)


def test_constant_response_gets_exact_model():
    model = fit_learner(LearnerSpec("main"), np.arange(5.0)[:, None], np.ones(5))
    assert model.kind == "constant"
    assert model.is_exact
    assert np.all(model.predict(np.zeros((3, 1))) == 1.0)


def test_constant_check_ignores_zero_weight_rows():
    model = fit_learner(LearnerSpec("main"), np.arange(4.0)[:, None], [0, 0, 0, 1], weights=[1, 1, 1, 0])
    assert model.kind == "constant" and model.constant == 0.0


def test_library_dispatch_records_selection(predictive_data):
    x, y = predictive_data
    model = fit_learner([LearnerSpec("intercept"), LearnerSpec("main")], x, y, folds=4, seed=2)
    assert model.report['folds'] == 4
    assert model.report['selected'] == "logistic_main"

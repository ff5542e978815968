import logging
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit
from learners import LearnerSpec, fit_binary_glm, fit_intercept_fluctuation, quasi_binomial_loss
from learners.glm import active_columns


def test_intercept_only_fit_is_logit_of_mean():
    model = fit_binary_glm(np.ones((4, 1)), [1, 1, 1, 0])
    assert model.converged
    assert model.coef[0] == pytest.approx(1.098612, abs=1e-6)


def test_weights_act_as_frequencies():
    model = fit_binary_glm(np.ones((2, 1)), [1, 0], weights=[3, 1])
    assert model.coef[0] == pytest.approx(logit(0.75), abs=1e-8)


def test_fractional_response_quasi_likelihood():
    model = fit_binary_glm(np.ones((2, 1)), [0.2, 0.4])
    assert expit(model.coef[0]) == pytest.approx(0.3, abs=1e-8)


def test_offset_shifts_the_intercept():
    y = np.array([1, 1, 1, 0])
    model = fit_binary_glm(np.ones((4, 1)), y, offset=np.full(4, 0.5))
    assert model.coef[0] == pytest.approx(logit(0.75) - 0.5, abs=1e-8)


def test_symmetric_identical_rows_give_zero_coefficients():
    model = LearnerSpec("main").fit(np.array([[1.0], [1.0]]), [0, 1])
    assert np.allclose(model.coef, 0.0, atol=1e-8)
    assert model.predict(np.array([[1.0]]))[0] == pytest.approx(0.5)


def test_separated_data_keeps_predictions_inside_unit_interval():
    x = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    model = LearnerSpec("main").fit(x, [0, 0, 1, 1])
    p = model.predict(x)
    assert np.all(np.isfinite(model.coef))
    assert np.all((p > 0) & (p < 1))
    assert p[-1] > 0.99 and p[0] < 0.01


def test_aliased_columns_are_dropped_and_reported_as_zero():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(200)
    y = (rng.random(200) < expit(x)).astype(float)
    duplicated = LearnerSpec("main").fit(np.column_stack([x, x]), y)
    single = LearnerSpec("main").fit(x[:, None], y)
    assert len(duplicated.active) == 2
    assert np.sum(duplicated.coef[1:] == 0.0) == 1
    assert duplicated.coef[0] == pytest.approx(single.coef[0], abs=1e-8)
    assert duplicated.coef[1:].sum() == pytest.approx(single.coef[1], abs=1e-8)


def test_active_columns_ignores_zero_weight_rows():
    X = np.column_stack([np.ones(4), [0.0, 0.0, 1.0, 2.0]])
    assert list(active_columns(X, [1, 1, 0, 0])) == [0]
    assert list(active_columns(X)) == [0, 1]


def test_fit_rejects_bad_inputs():
    with pytest.raises(ValueError):
        fit_binary_glm(np.ones((3, 1)), [1, 0])
    with pytest.raises(ValueError):
        fit_binary_glm(np.ones((2, 1)), [1, 0], weights=[0, 0])
    with pytest.raises(ValueError):
        LearnerSpec("main").fit(np.ones((2, 1)), [1.5, 0])
    with pytest.raises(ValueError):
        LearnerSpec("splines")


def test_fluctuation_single_point():
    assert fit_intercept_fluctuation([0.8], [0.0], [1.0]) == pytest.approx(1.386294, abs=1e-6)


def test_fluctuation_is_zero_at_a_solved_score():
    y = np.array([0.2, 0.6])
    eps = fit_intercept_fluctuation(y, logit(np.array([0.4, 0.4])), [1.0, 1.0])
    assert eps == pytest.approx(0.0, abs=1e-12)


def test_fluctuation_with_no_weight_is_vacuous(caplog):
    with caplog.at_level(logging.WARNING):
        assert fit_intercept_fluctuation([0.3, 0.7], [0.0, 0.0], [0.0, 0.0]) == 0.0
    assert "no positive weight" in caplog.text


def test_fluctuation_without_root_returns_bracket_end(caplog):
    with caplog.at_level(logging.WARNING):
        eps = fit_intercept_fluctuation([0.0, 0.0, 0.0], [0.0, 1.0, -1.0], [1.0, 2.0, 1.0])
    assert eps == -50.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.05, 0.95), st.floats(0.1, 10.0)), min_size=2, max_size=30),
       st.floats(-3.0, 3.0))
def test_fluctuation_solves_weighted_score(rows, offset):
    y = np.array([r[0] for r in rows])
    w = np.array([r[1] for r in rows])
    o = np.full(len(y), offset)
    eps = fit_intercept_fluctuation(y, o, w)
    score = np.sum(w * (y - expit(o + eps)))
    assert abs(score) < 1e-8 * max(1.0, w.sum())


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.1, 5.0)), min_size=2, max_size=40))
def test_intercept_fit_matches_weighted_mean(rows):
    y = np.array([r[0] for r in rows])
    w = np.array([r[1] for r in rows])
    mean = np.sum(w * y) / np.sum(w)
    if not 0.01 < mean < 0.99:
        return
    model = fit_binary_glm(np.ones((len(y), 1)), y, weights=w)
    assert expit(model.coef[0]) == pytest.approx(mean, abs=1e-6)


def test_loss_is_per_unit_weight():
    assert quasi_binomial_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5]), np.array([1.0, 1.0])) == \
        pytest.approx(np.log(2.0))
    assert np.isnan(quasi_binomial_loss(np.array([1.0]), np.array([0.5]), np.array([0.0])))


def test_learner_round_trips_through_config():
    spec = LearnerSpec.from_dict({'features': "interactions", 'max_iter': 20})
    assert spec.name == "logistic_interactions"
    assert LearnerSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()
    assert spec.get_info()['parameters']['max_iter'] == 20


def test_fluctuation_falls_back_to_bracketing_when_newton_oscillates():
    eps = fit_intercept_fluctuation([0.5, 0.75], [3.0, 3.0], [1.0, 1.0])
    assert eps == pytest.approx(logit(0.625) - 3.0, abs=1e-10)


def test_intercept_glm_with_offset_matches_fluctuation():
    rng = np.random.default_rng(3)
    y = rng.random(50)
    offset = rng.normal(0.0, 1.5, 50)
    w = rng.uniform(0.2, 4.0, 50)
    model = fit_binary_glm(np.ones((50, 1)), y, weights=w, offset=offset)
    assert model.coef[0] == pytest.approx(fit_intercept_fluctuation(y, offset, w), abs=1e-8)


def test_predictions_survive_affine_rescaling_of_a_column():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((500, 2))
    y = (rng.random(500) < expit(0.4 + x @ [1.0, -0.7])).astype(float)
    rescaled = x.copy()
    rescaled[:, 0] = 3.0 * x[:, 0] - 2.0
    spec = LearnerSpec("main")
    first = spec.fit(x, y).predict(x)
    second = spec.fit(rescaled, y).predict(rescaled)
    assert np.max(np.abs(first - second)) < 1e-8


def test_saturated_fit_keeps_cell_means_and_knows_its_cells():
    x = np.array([[0.0], [0.0], [1.0], [1.0]])
    model = LearnerSpec("saturated").fit(x, [0, 0, 1, 0])
    p = model.predict(np.array([[0.0], [1.0]]))
    assert p[0] < 1e-6
    assert p[1] == pytest.approx(0.5, abs=1e-8)
    assert model.covers(np.array([[0.0], [1.0], [2.0]])).tolist() == [True, True, False]
    assert LearnerSpec("main").fit(x, [0, 0, 1, 0]).covers(np.array([[2.0]])).tolist() == [True]

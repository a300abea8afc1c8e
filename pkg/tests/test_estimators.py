import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from metatailor import autodiff as ad
from metatailor.errors import ContractViolation
from metatailor.estimators import TailoredRegressor
from metatailor.losses import mse_per_row


def pull_to_half_input(model, x):
    out = model(x)
    return mse_per_row(out, ad.constant(np.full(out.shape, 0.5)))


def make_regression(rng, n=48, d=3):
    x = rng.normal(size=(n, d))
    w = rng.normal(size=(d, 2))
    y = np.tanh(x @ w)
    return x, y


class TestSklearnProtocol:
    def test_get_set_params_roundtrip(self):
        est = TailoredRegressor(hidden_widths=(8,), epochs=3, random_state=1)
        params = est.get_params()
        assert params["hidden_widths"] == (8,)
        est.set_params(epochs=5)
        assert est.epochs == 5

    def test_clone_preserves_configuration(self):
        est = TailoredRegressor(mode="cngrad1", tailor_loss=pull_to_half_input, epochs=2)
        cloned = clone(est)
        assert cloned.mode == "cngrad1"
        assert cloned.tailor_loss is pull_to_half_input

    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            TailoredRegressor().predict(np.zeros((2, 3)))

    def test_fitted_attributes(self):
        rng = np.random.default_rng(0)
        x, y = make_regression(rng)
        est = TailoredRegressor(hidden_widths=(8,), epochs=3, random_state=0).fit(x, y)
        assert est.n_features_in_ == 3
        assert est.params_ is not None
        assert len(est.train_log_.records) == 3


class TestValidation:
    def test_rejects_nan_inputs(self):
        x = np.zeros((4, 2))
        y = np.zeros((4, 1))
        x[0, 0] = np.nan
        with pytest.raises(ContractViolation):
            TailoredRegressor(epochs=1).fit(x, y)

    def test_rejects_inconsistent_rows(self):
        with pytest.raises(ContractViolation):
            TailoredRegressor(epochs=1).fit(np.zeros((4, 2)), np.zeros((3, 1)))

    def test_rejects_unknown_mode(self):
        with pytest.raises(ContractViolation):
            TailoredRegressor(mode="banana", epochs=1).fit(np.zeros((4, 2)), np.zeros((4, 1)))

    def test_adaptive_mode_requires_tailor_loss(self):
        with pytest.raises(ContractViolation):
            TailoredRegressor(mode="cngrad1", epochs=1).fit(np.zeros((4, 2)), np.zeros((4, 1)))

    def test_predict_checks_feature_count(self):
        rng = np.random.default_rng(1)
        x, y = make_regression(rng)
        est = TailoredRegressor(hidden_widths=(8,), epochs=2, random_state=0).fit(x, y)
        with pytest.raises(ContractViolation):
            est.predict(np.zeros((2, 5)))


class TestTraining:
    def test_inductive_fit_reduces_loss(self):
        rng = np.random.default_rng(2)
        x, y = make_regression(rng, n=96)
        est = TailoredRegressor(
            hidden_widths=(16,), epochs=40, outer_lr=0.1, random_state=0
        ).fit(x, y)
        assert -est.score(x, y) < 0.25 * y.var()

    def test_same_random_state_reproduces_fit(self):
        rng = np.random.default_rng(3)
        x, y = make_regression(rng)
        a = TailoredRegressor(hidden_widths=(8,), epochs=5, random_state=7).fit(x, y)
        b = TailoredRegressor(hidden_widths=(8,), epochs=5, random_state=7).fit(x, y)
        np.testing.assert_array_equal(a.predict(x), b.predict(x))

    def test_cngrad_mode_with_adapted_prediction(self):
        rng = np.random.default_rng(4)
        x, y = make_regression(rng)
        est = TailoredRegressor(
            mode="cngrad1",
            tailor_loss=pull_to_half_input,
            hidden_widths=(8,),
            epochs=5,
            inner_steps=2,
            inner_lr=1e-2,
            random_state=0,
        ).fit(x, y)
        adapted = est.predict(x)
        plain = est.predict(x, adapt=False)
        assert adapted.shape == y.shape
        assert not np.array_equal(adapted, plain)

    def test_mammoth_mode_runs(self):
        rng = np.random.default_rng(5)
        x, y = make_regression(rng, n=12)
        est = TailoredRegressor(
            mode="mammoth1",
            tailor_loss=pull_to_half_input,
            hidden_widths=(6,),
            epochs=2,
            batch_size=6,
            inner_steps=1,
            inner_lr=1e-3,
            random_state=0,
        ).fit(x, y)
        assert est.predict(x, adapt=False).shape == y.shape

    def test_eval_schedule_zero_steps_is_plain_forward(self):
        rng = np.random.default_rng(6)
        x, y = make_regression(rng)
        est = TailoredRegressor(
            mode="cngrad1",
            tailor_loss=pull_to_half_input,
            hidden_widths=(8,),
            epochs=3,
            inner_steps=1,
            inner_lr=1e-2,
            eval_steps=0,
            random_state=0,
        ).fit(x, y)
        np.testing.assert_array_equal(est.predict(x), est.predict(x, adapt=False))

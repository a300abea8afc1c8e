"""Scikit-learn compatible estimator over the adaptation engine.

`TailoredRegressor` behaves like any sklearn regressor (``get_params`` /
``set_params`` / ``clone`` / ``fit`` / ``predict``) while supporting the
full training-mode matrix: plain induction, CN-adaptation training (first or
second order), and full-parameter adaptation. At prediction time the model
optionally fine-tunes its per-sample affine parameters on an unsupervised
loss evaluated at the queries themselves.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .engine import (
    TailorConfig,
    TrainData,
    predict_tailored,
    train_cngrad,
    train_inductive,
    train_mammoth,
)
from .autodiff import Tensor
from .errors import ContractViolation
from .losses import mse
from .net import ModelConfig, forward_cn, identity_cn
from .validation import check_array, check_consistent_rows, check_random_state

_MODES = ("inductive", "cngrad1", "cngrad2", "mammoth1", "mammoth2")


class TailoredRegressor(BaseEstimator, RegressorMixin):
    """Feed-forward regressor with optional per-query adaptation.

    Parameters
    ----------
    hidden_widths : tuple of int, default (64, 64, 64)
        Hidden layer sizes.
    activation : {'softplus', 'tanh'}, default 'softplus'
    residual : bool, default False
        Add the input to the output (delta prediction); requires matching
        input/output dimensions.
    mode : {'inductive', 'cngrad1', 'cngrad2', 'mammoth1', 'mammoth2'}
        Training regime: plain induction, CN-adaptation training (first /
        second order), or full-parameter adaptation (first / second order).
    tailor_loss : callable or None
        Unsupervised inner loss with signature ``(model, X) -> (n, 1)``
        per-row loss tensor, where ``model(X)`` forwards under the current
        adaptation state. Required for any mode other than 'inductive', and
        for adapted prediction.
    inner_steps, inner_lr : adaptation schedule used during training.
    eval_steps, eval_lr : adaptation schedule used inside ``predict``; None
        reuses the training schedule.
    outer_lr, momentum, epochs, batch_size : outer-loop optimization.
    aux_weight : float, default 0.0
        Weight of the tailor loss added to the supervised objective during
        *inductive* training (auxiliary regularization).
    random_state : int or None

    Attributes
    ----------
    params_ : trained weights (MlpParams)
    model_config_ : resolved architecture (ModelConfig)
    train_log_ : per-epoch TrainLog
    n_features_in_ : int
    """

    def __init__(
        self,
        hidden_widths: tuple = (64, 64, 64),
        activation: str = "softplus",
        residual: bool = False,
        mode: str = "inductive",
        tailor_loss=None,
        inner_steps: int = 2,
        inner_lr: float = 1e-3,
        eval_steps: int | None = None,
        eval_lr: float | None = None,
        outer_lr: float = 5e-2,
        momentum: float = 0.0,
        epochs: int = 100,
        batch_size: int = 64,
        aux_weight: float = 0.0,
        random_state: int | None = None,
    ):
        self.hidden_widths = hidden_widths
        self.activation = activation
        self.residual = residual
        self.mode = mode
        self.tailor_loss = tailor_loss
        self.inner_steps = inner_steps
        self.inner_lr = inner_lr
        self.eval_steps = eval_steps
        self.eval_lr = eval_lr
        self.outer_lr = outer_lr
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.aux_weight = aux_weight
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, "X")
        y = check_array(y, "y")
        check_consistent_rows(X, y)
        if self.mode not in _MODES:
            raise ContractViolation(f"mode must be one of {_MODES}, got '{self.mode}'")
        if self.mode != "inductive" and self.tailor_loss is None:
            raise ContractViolation(f"mode '{self.mode}' requires a tailor_loss")
        seed = check_random_state(self.random_state)

        widths = [X.shape[1], *self.hidden_widths, y.shape[1]]
        config = ModelConfig(
            widths=widths, activation=self.activation, residual=self.residual
        )
        data = TrainData(x=X, y=y)
        if self.mode == "inductive":
            aux = None
            if self.aux_weight != 0.0 and self.tailor_loss is not None:
                # The trainer already has the prediction in hand; expose it to
                # (x, yhat)-style tailor losses through a trivial adapter.
                def aux(xb, pred):
                    from . import autodiff as ad

                    return ad.mean_all(self.tailor_loss(_PredWrapper(pred), xb))

            params, log = train_inductive(
                data,
                config,
                mse,
                aux_loss=aux,
                aux_weight=self.aux_weight,
                epochs=self.epochs,
                batch_size=self.batch_size,
                seed=seed,
                outer_lr=self.outer_lr,
                momentum=self.momentum,
            )
        else:
            order = "second" if self.mode.endswith("2") else "first"
            cfg = TailorConfig(
                steps=self.inner_steps,
                inner_lr=self.inner_lr,
                outer_lr=self.outer_lr,
                order=order,
                outer_momentum=self.momentum,
            )
            trainer = train_cngrad if self.mode.startswith("cngrad") else train_mammoth
            params, log = trainer(
                data,
                config,
                mse,
                self.tailor_loss,
                cfg,
                epochs=self.epochs,
                batch_size=self.batch_size,
                seed=seed,
            )
        self.model_config_ = config
        self.params_ = params
        self.train_log_ = log
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, adapt: bool | None = None):
        self._check_fitted()
        X = check_array(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ContractViolation(
                f"X has {X.shape[1]} features; the model was fit with {self.n_features_in_}"
            )
        steps = self.inner_steps if self.eval_steps is None else self.eval_steps
        lr = self.inner_lr if self.eval_lr is None else self.eval_lr
        if adapt is None:
            adapt = self.tailor_loss is not None and self.mode != "inductive"
        xt = Tensor(X)
        if not adapt or steps == 0 or self.tailor_loss is None:
            from . import autodiff as ad

            with ad.no_grad():
                out = forward_cn(
                    self.model_config_,
                    self.params_,
                    identity_cn(X.shape[0], self.model_config_, requires_grad=False),
                    xt,
                )
            return out.data.copy()
        cfg = TailorConfig(steps=steps, inner_lr=lr, order="first")
        return predict_tailored(
            self.model_config_, self.params_, self.tailor_loss, cfg, xt
        ).data.copy()

    def score(self, X, y):
        """Negative test MSE (sklearn convention: larger is better)."""
        pred = self.predict(X)
        y = check_array(y, "y")
        return -float(((pred - y) ** 2).mean())

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "This TailoredRegressor is not fitted yet; call fit(X, y) first."
            )


class _PredWrapper:
    """Adapter so (x, yhat)-style losses fit the inner-loss signature when
    the prediction is already available."""

    def __init__(self, pred):
        self._pred = pred

    def __call__(self, x):
        return self._pred

    def penultimate(self, x):
        raise ContractViolation(
            "auxiliary regularization cannot use feature-level losses"
        )

"""Nested optimization: per-query adaptation inside prediction, and training
loops that account for that adaptation.

The inner loop adapts only the conditional-normalization parameters (or, in
the model-agnostic variant, every parameter) by plain gradient descent on an
unsupervised loss evaluated at the query itself. The outer loop updates the
shared weights on the supervised loss of the *adapted* model. Both update
orders are supported:

* first order - inner gradients are constants w.r.t. the weights, and the
  adapted CN parameters are severed from the graph between steps;
* second order - the outer weight gradient flows through the inner updates,
  which requires gradients that are themselves differentiable.

Inner updates are simultaneous: at step s both gamma and beta gradients are
evaluated at (gamma_{s-1}, beta_{s-1}).

Row pooling decides how many queries share one CN row: `per_row` adapts each
row independently (each row descends on its own loss), `whole_batch` adapts a
single shared row on the mean loss over all rows, and `interleave` shares one
row across k consecutive inputs, averaging the loss within each group. The
pooled objective is the sum of per-group means, so per-row steps do not
shrink with batch size and groups stay independent.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, NumericFault, TrainingFault
from .net import CnParams, MlpParams, ModelConfig, forward_cn, identity_cn, init_params

DIVERGENCE_LIMIT = 1e6

# An inner loss maps (model, X) -> per-row loss column, where `model`
# evaluates the network under the CN parameters being adapted.
InnerLoss = Callable[["TailorForward", Tensor], Tensor]


class TailorForward:
    """Model handle passed to inner losses: forward under the current CN state."""

    def __init__(self, config: ModelConfig, params: MlpParams, cn: CnParams):
        self.config = config
        self.params = params
        self.cn = cn

    def __call__(self, x: Tensor) -> Tensor:
        return forward_cn(self.config, self.params, self.cn, x)

    def penultimate(self, x: Tensor) -> Tensor:
        _, hidden = forward_cn(self.config, self.params, self.cn, x, return_hidden=True)
        return hidden[-1]


@dataclass
class TailorConfig:
    """Hyperparameters of the nested optimization.

    The contract optimizer is plain gradient descent in both loops;
    `outer_momentum` is an explicitly-logged opt-in that applies classical
    momentum to the outer weight updates only.
    """

    steps: int = 1
    inner_lr: float = 1e-3  # adaptation step size
    outer_lr: float = 1e-2  # shared-weight step size
    order: str = "first"  # 'first' | 'second'
    detach_between_steps: bool | None = None  # default: on for first order only
    pool_mode: str = "per_row"  # 'per_row' | 'whole_batch' | 'interleave'
    pool_size: int = 1  # group width for 'interleave'
    outer_momentum: float = 0.0

    def __post_init__(self):
        if self.steps < 0 or self.inner_lr < 0 or self.outer_lr < 0:
            raise ContractViolation("TailorConfig: steps and step sizes must be nonnegative")
        if self.order not in ("first", "second"):
            raise ContractViolation(f"TailorConfig: unknown order '{self.order}'")
        if self.pool_mode not in ("per_row", "whole_batch", "interleave"):
            raise ContractViolation(f"TailorConfig: unknown pool mode '{self.pool_mode}'")
        if self.pool_mode == "interleave" and self.pool_size < 1:
            raise ContractViolation("TailorConfig: interleave pool size must be >= 1")
        if not 0.0 <= self.outer_momentum < 1.0:
            raise ContractViolation("TailorConfig: outer_momentum must be in [0, 1)")

    @property
    def detach(self) -> bool:
        if self.detach_between_steps is None:
            return self.order == "first"
        return self.detach_between_steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detach_between_steps"] = self.detach
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float | None
    tailor_loss_before: float | None
    tailor_loss_after: float | None
    wall_time: float


@dataclass
class TrainLog:
    seed: int
    mode: str
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ContractViolation("TrainLog: epoch indices must increase")
        self.records.append(rec)

    def signature(self) -> list[dict]:
        """Deterministic view (timing excluded) for reproducibility checks."""
        out = []
        for r in self.records:
            d = asdict(r)
            d.pop("wall_time")
            out.append(d)
        return out

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({"seed": self.seed, "mode": self.mode, **asdict(r)}) + "\n")


# -- pooling helpers -----------------------------------------------------------


def _pool_group_size(cfg: TailorConfig, batch: int) -> int:
    if cfg.pool_mode == "per_row":
        return 1
    if cfg.pool_mode == "whole_batch":
        return batch
    if batch % cfg.pool_size != 0:
        raise ContractViolation(
            f"interleave: batch {batch} not divisible by pool size {cfg.pool_size}"
        )
    return cfg.pool_size


def _expand_rows(t: Tensor, k: int) -> Tensor:
    return t if k == 1 else ad.repeat_rows(t, k)


def _pooled_objective(per_row: Tensor, k: int) -> Tensor:
    """Sum over groups of the within-group mean of a (b, 1) loss column."""
    if k == 1:
        return ad.sum_all(per_row)
    return ad.scale(ad.sum_all(ad.group_sum_rows(per_row, k)), 1.0 / k)


# -- per-query adaptation --------------------------------------------------------


def tailor(
    config: ModelConfig,
    params: MlpParams,
    inner_loss: InnerLoss,
    cfg: TailorConfig,
    x: Tensor,
    create_graph: bool = False,
) -> tuple[list[CnParams], list[float]]:
    """Adapt CN parameters to `x` by gradient descent on the inner loss.

    Returns the full state sequence cn_0..cn_S (cn_0 is the identity) and the
    pooled objective value observed at the start of each step plus after the
    last one. Updates are simultaneous; with ``create_graph`` the returned
    states stay differentiable w.r.t. the weights (second-order training).
    """
    batch = x.shape[0]
    k = _pool_group_size(cfg, batch)
    cn = identity_cn(batch // k, config)
    sequence = [cn]
    losses: list[float] = []
    for step in range(cfg.steps):
        expanded = CnParams(_expand_rows(cn.gamma, k), _expand_rows(cn.beta, k))
        per_row = inner_loss(TailorForward(config, params, expanded), x)
        objective = _pooled_objective(per_row, k)
        losses.append(objective.item() / (batch // k))
        grads = ad.gradient(objective, [cn.gamma, cn.beta], create_graph=create_graph)
        if not all(np.all(np.isfinite(g.data)) for g in grads):
            raise NumericFault(f"non-finite inner gradient at adaptation step {step + 1}")
        gamma = ad.sub(cn.gamma, ad.scale(grads[0], cfg.inner_lr))
        beta = ad.sub(cn.beta, ad.scale(grads[1], cfg.inner_lr))
        cn = CnParams(gamma, beta)
        if cfg.detach:
            cn = cn.detach()
        sequence.append(cn)
    final = CnParams(
        _expand_rows(sequence[-1].gamma, k), _expand_rows(sequence[-1].beta, k)
    )
    with ad.no_grad():
        per_row = inner_loss(TailorForward(config, params, final), x)
        losses.append(_pooled_objective(per_row, k).item() / (batch // k))
    return sequence, losses


def _expanded(cn: CnParams, cfg: TailorConfig, batch: int) -> CnParams:
    k = _pool_group_size(cfg, batch)
    return CnParams(_expand_rows(cn.gamma, k), _expand_rows(cn.beta, k))


def predict_tailored(
    config: ModelConfig,
    params: MlpParams,
    inner_loss: InnerLoss,
    cfg: TailorConfig,
    x: Tensor,
) -> Tensor:
    """Adapt to `x`, then forward with the final CN state."""
    if cfg.steps == 0 or cfg.inner_lr == 0.0:
        sequence = [identity_cn(x.shape[0] // _pool_group_size(cfg, x.shape[0]), config)]
    else:
        sequence, _ = tailor(config, params, inner_loss, cfg, x)
    with ad.no_grad():
        return forward_cn(config, params, _expanded(sequence[-1], cfg, x.shape[0]), x)


def batch_ttt(
    config: ModelConfig,
    params: MlpParams,
    inner_loss: InnerLoss,
    cfg: TailorConfig,
    x_all: Tensor,
) -> Tensor:
    """Adapt one shared CN row on the mean loss over the whole batch."""
    pooled = TailorConfig(**{**cfg.to_dict(), "pool_mode": "whole_batch", "pool_size": 1})
    return predict_tailored(config, params, inner_loss, pooled, x_all)


def optimize_output(
    yhat0: Tensor,
    x: Tensor,
    output_loss: Callable[[Tensor, Tensor], Tensor],
    steps: int,
    lr: float,
) -> Tensor:
    """Gradient descent on the physics loss directly in output space.

    `output_loss(x, yhat)` must return a per-row loss column; each row's
    output descends on its own loss, the model is untouched.
    """
    yhat = yhat0.detach(requires_grad=True)
    for _ in range(steps):
        objective = ad.sum_all(output_loss(x, yhat))
        (grad,) = ad.gradient(objective, [yhat])
        yhat = Tensor(yhat.data - lr * grad.data, requires_grad=True)
    return yhat.detach()


# -- shared training plumbing -----------------------------------------------------


@dataclass
class TrainData:
    """Training pairs plus optional held-out pairs for per-epoch logging."""

    x: np.ndarray
    y: np.ndarray
    x_test: np.ndarray | None = None
    y_test: np.ndarray | None = None

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ContractViolation("TrainData: x/y row counts differ")


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_divergence(value: float, epoch: int, batch: int) -> None:
    if not np.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise TrainingFault(
            f"training diverged (loss {value:.3e}) at epoch {epoch}, batch {batch}",
            epoch=epoch,
            batch=batch,
        )


class _OuterStepper:
    """Outer-loop updates: plain gradient descent, optionally with classical
    momentum (velocity state lives here, one buffer per parameter)."""

    def __init__(self, params: MlpParams, momentum: float = 0.0):
        self.momentum = momentum
        self.velocity = (
            [np.zeros_like(t.data) for t in params.tensors] if momentum > 0 else None
        )

    def step(self, params: MlpParams, grads: list[np.ndarray], lr: float) -> None:
        if self.velocity is None:
            for t, g in zip(params.tensors, grads):
                t.data -= lr * g
            return
        for t, g, v in zip(params.tensors, grads, self.velocity):
            v *= self.momentum
            v += g
            t.data -= lr * v


def _apply_outer_step(params: MlpParams, grads: list[np.ndarray], lr: float) -> None:
    for t, g in zip(params.tensors, grads):
        t.data -= lr * g


def _plain_test_loss(config: ModelConfig, params: MlpParams, data: TrainData) -> float | None:
    if data.x_test is None:
        return None
    from .losses import mse

    with ad.no_grad():
        pred = forward_cn(
            config, params, identity_cn(data.x_test.shape[0], config, requires_grad=False),
            Tensor(data.x_test),
        )
        return mse(pred, Tensor(data.y_test)).item()


def _epoch_loop(epochs: int, data: TrainData, batch_size: int, seed: int):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    for epoch in range(epochs):
        yield epoch, list(_batches(data.x.shape[0], batch_size, rng))


# -- training variants -------------------------------------------------------------


def train_inductive(
    data: TrainData,
    config: ModelConfig,
    sup_loss: Callable[[Tensor, Tensor], Tensor],
    aux_loss: Callable[[Tensor, Tensor], Tensor] | None = None,
    aux_weight: float = 0.0,
    epochs: int = 100,
    batch_size: int = 256,
    seed: int = 0,
    outer_lr: float = 1e-2,
    params: MlpParams | None = None,
    momentum: float = 0.0,
) -> tuple[MlpParams, TrainLog]:
    """Minibatch gradient descent on L_sup (+ optional auxiliary penalty).

    CN layers stay at the identity throughout. `aux_loss(x, yhat)` is a
    scalar penalty on the predictions, added with weight `aux_weight`.
    """
    if params is None:
        params = init_params(config, seed)
    stepper = _OuterStepper(params, momentum)
    log = TrainLog(seed=seed, mode="inductive" if aux_weight == 0.0 else "inductive_aux")
    for epoch, batches in _epoch_loop(epochs, data, batch_size, seed):
        t0 = time.perf_counter()
        epoch_loss = 0.0
        for b, idx in enumerate(batches):
            xb, yb = Tensor(data.x[idx]), Tensor(data.y[idx])
            cn = identity_cn(xb.shape[0], config, requires_grad=False)
            pred = forward_cn(config, params, cn, xb)
            loss = sup_loss(pred, yb)
            if aux_weight != 0.0 and aux_loss is not None:
                from .losses import aux_regularized_loss

                loss = aux_regularized_loss(loss, aux_loss(xb, pred), aux_weight)
            value = loss.item()
            _check_divergence(value, epoch, b)
            epoch_loss += value * len(idx)
            grads = ad.gradient(loss, params.tensors)
            stepper.step(params, [g.data for g in grads], outer_lr)
        log.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / data.x.shape[0],
                test_loss=_plain_test_loss(config, params, data),
                tailor_loss_before=None,
                tailor_loss_after=None,
                wall_time=time.perf_counter() - t0,
            )
        )
    return params, log


def train_cngrad(
    data: TrainData,
    config: ModelConfig,
    sup_loss: Callable[[Tensor, Tensor], Tensor],
    inner_loss: InnerLoss,
    cfg: TailorConfig,
    epochs: int = 100,
    batch_size: int = 256,
    seed: int = 0,
    params: MlpParams | None = None,
) -> tuple[MlpParams, TrainLog]:
    """CN-adaptation training: inner descent on the unsupervised loss, outer
    descent of the shared weights on the supervised loss of the adapted model.

    Per batch the CN state resets to the identity and the weight gradient
    accumulates the supervised gradient after every inner step; the single
    outer update applies the accumulated gradient. With steps=0 this is
    plain inductive training.
    """
    if cfg.steps == 0:
        return train_inductive(
            data, config, sup_loss, epochs=epochs, batch_size=batch_size, seed=seed,
            outer_lr=cfg.outer_lr, params=params, momentum=cfg.outer_momentum,
        )
    if params is None:
        params = init_params(config, seed)
    stepper = _OuterStepper(params, cfg.outer_momentum)
    second = cfg.order == "second"
    log = TrainLog(seed=seed, mode=f"cngrad_{cfg.order}")
    for epoch, batches in _epoch_loop(epochs, data, batch_size, seed):
        t0 = time.perf_counter()
        epoch_loss = 0.0
        before_sum = after_sum = 0.0
        for b, idx in enumerate(batches):
            xb, yb = Tensor(data.x[idx]), Tensor(data.y[idx])
            k = _pool_group_size(cfg, xb.shape[0])
            cn = identity_cn(xb.shape[0] // k, config)
            grad_w = [np.zeros_like(t.data) for t in params.tensors]
            last_sup = 0.0
            for step in range(cfg.steps):
                expanded = CnParams(_expand_rows(cn.gamma, k), _expand_rows(cn.beta, k))
                per_row = inner_loss(TailorForward(config, params, expanded), xb)
                objective = _pooled_objective(per_row, k)
                if step == 0:
                    before_sum += objective.item() / (xb.shape[0] // k) * len(idx)
                inner_grads = ad.gradient(
                    objective, [cn.gamma, cn.beta], create_graph=second
                )
                cn = CnParams(
                    ad.sub(cn.gamma, ad.scale(inner_grads[0], cfg.inner_lr)),
                    ad.sub(cn.beta, ad.scale(inner_grads[1], cfg.inner_lr)),
                )
                if cfg.detach:
                    cn = cn.detach()
                stepped = CnParams(_expand_rows(cn.gamma, k), _expand_rows(cn.beta, k))
                sup = sup_loss(forward_cn(config, params, stepped, xb), yb)
                last_sup = sup.item()
                _check_divergence(last_sup, epoch, b)
                for acc, g in zip(grad_w, ad.gradient(sup, params.tensors)):
                    acc += g.data
            with ad.no_grad():
                final = CnParams(_expand_rows(cn.gamma, k), _expand_rows(cn.beta, k))
                per_row = inner_loss(TailorForward(config, params, final), xb)
                after_sum += (
                    _pooled_objective(per_row, k).item() / (xb.shape[0] // k) * len(idx)
                )
            epoch_loss += last_sup * len(idx)
            stepper.step(params, grad_w, cfg.outer_lr)
        n = data.x.shape[0]
        log.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / n,
                test_loss=_plain_test_loss(config, params, data),
                tailor_loss_before=before_sum / n,
                tailor_loss_after=after_sum / n,
                wall_time=time.perf_counter() - t0,
            )
        )
    return params, log


def cngrad_outer_objective(
    config: ModelConfig,
    params: MlpParams,
    sup_loss: Callable[[Tensor, Tensor], Tensor],
    inner_loss: InnerLoss,
    cfg: TailorConfig,
    x: np.ndarray,
    y: np.ndarray,
) -> float:
    """Value of the accumulated outer objective for one batch: the sum over
    inner steps of the post-step supervised loss. Used by gradient oracles."""
    xb, yb = Tensor(x), Tensor(y)
    k = _pool_group_size(cfg, xb.shape[0])
    cn = identity_cn(xb.shape[0] // k, config)
    total = 0.0
    for _ in range(cfg.steps):
        expanded = CnParams(_expand_rows(cn.gamma, k), _expand_rows(cn.beta, k))
        per_row = inner_loss(TailorForward(config, params, expanded), xb)
        grads = ad.gradient(_pooled_objective(per_row, k), [cn.gamma, cn.beta])
        cn = CnParams(
            ad.sub(cn.gamma, ad.scale(grads[0], cfg.inner_lr)),
            ad.sub(cn.beta, ad.scale(grads[1], cfg.inner_lr)),
        )
        stepped = CnParams(_expand_rows(cn.gamma, k), _expand_rows(cn.beta, k))
        with ad.no_grad():
            total += sup_loss(forward_cn(config, params, stepped, xb), yb).item()
    return total


def train_mammoth(
    data: TrainData,
    config: ModelConfig,
    sup_loss: Callable[[Tensor, Tensor], Tensor],
    inner_loss: InnerLoss,
    cfg: TailorConfig,
    epochs: int = 100,
    batch_size: int = 32,
    seed: int = 0,
    params: MlpParams | None = None,
) -> tuple[MlpParams, TrainLog]:
    """Model-agnostic variant: each sample adapts a full copy of *all*
    parameters with one (or more) inner steps, and the outer step descends
    the mean supervised loss of the adapted copies.

    Rows are adapted independently (logically sequential; each row owns its
    graph). First order evaluates the outer gradient at the adapted
    parameters without differentiating through the update; second order
    differentiates through it.
    """
    if params is None:
        params = init_params(config, seed)
    stepper = _OuterStepper(params, cfg.outer_momentum)
    second = cfg.order == "second"
    log = TrainLog(seed=seed, mode=f"mammoth_{cfg.order}")
    for epoch, batches in _epoch_loop(epochs, data, batch_size, seed):
        t0 = time.perf_counter()
        epoch_loss = 0.0
        before_sum = after_sum = 0.0
        for b, idx in enumerate(batches):
            grad_w = [np.zeros_like(t.data) for t in params.tensors]
            batch_loss = 0.0
            for row in idx:
                xr = Tensor(data.x[row : row + 1])
                yr = Tensor(data.y[row : row + 1])
                adapted, before, after = _mammoth_adapt(
                    config, params, inner_loss, cfg, xr, create_graph=second
                )
                before_sum += before
                after_sum += after
                pred = forward_cn(
                    config, adapted, identity_cn(1, config, requires_grad=False), xr
                )
                sup = sup_loss(pred, yr)
                batch_loss += sup.item()
                wrt = params.tensors if second else adapted.tensors
                for acc, g in zip(grad_w, ad.gradient(sup, wrt)):
                    acc += g.data / len(idx)
            _check_divergence(batch_loss / len(idx), epoch, b)
            epoch_loss += batch_loss
            stepper.step(params, grad_w, cfg.outer_lr)
        n = data.x.shape[0]
        log.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / n,
                test_loss=_plain_test_loss(config, params, data),
                tailor_loss_before=before_sum / n,
                tailor_loss_after=after_sum / n,
                wall_time=time.perf_counter() - t0,
            )
        )
    return params, log


def _mammoth_adapt(
    config: ModelConfig,
    params: MlpParams,
    inner_loss: InnerLoss,
    cfg: TailorConfig,
    x_row: Tensor,
    create_graph: bool,
) -> tuple[MlpParams, float, float]:
    """Full-parameter inner descent for a single row; returns the adapted
    parameter copy plus the inner loss before/after."""
    current = params
    cn0 = identity_cn(x_row.shape[0], config, requires_grad=False)
    before = after = 0.0
    for step in range(cfg.steps):
        model = TailorForward(config, current, cn0)
        objective = ad.sum_all(inner_loss(model, x_row))
        if step == 0:
            before = objective.item()
        grads = ad.gradient(objective, current.tensors, create_graph=create_graph)
        new_tensors = [
            ad.sub(t, ad.scale(g, cfg.inner_lr)) for t, g in zip(current.tensors, grads)
        ]
        if not create_graph:
            new_tensors = [t.detach(requires_grad=True) for t in new_tensors]
        current = _params_from_tensors(config, new_tensors)
    with ad.no_grad():
        after = ad.sum_all(inner_loss(TailorForward(config, current, cn0), x_row)).item()
    return current, before, after


def _params_from_tensors(config: ModelConfig, tensors: Sequence[Tensor]) -> MlpParams:
    weights = [tensors[2 * i] for i in range(len(config.widths) - 1)]
    biases = [tensors[2 * i + 1] for i in range(len(config.widths) - 1)]
    return MlpParams(weights, biases)


def mammoth_outer_objective(
    config: ModelConfig,
    params: MlpParams,
    sup_loss: Callable[[Tensor, Tensor], Tensor],
    inner_loss: InnerLoss,
    cfg: TailorConfig,
    x: np.ndarray,
    y: np.ndarray,
) -> float:
    """Mean supervised loss of the per-row adapted copies (oracle target)."""
    total = 0.0
    for row in range(x.shape[0]):
        xr, yr = Tensor(x[row : row + 1]), Tensor(y[row : row + 1])
        adapted, _, _ = _mammoth_adapt(config, params, inner_loss, cfg, xr, create_graph=False)
        with ad.no_grad():
            pred = forward_cn(config, adapted, identity_cn(1, config, requires_grad=False), xr)
            total += sup_loss(pred, yr).item()
    return total / x.shape[0]


# -- few-shot meta-learning (supervised inner loss, shared CN rows per task) ------


@dataclass
class TaskBatch:
    """One meta-batch: support (b*k, d) and query (b*k', d) rows, grouped so
    that task t owns support rows t*k..t*k+k-1 and query rows t*k'..."""

    x_support: np.ndarray
    y_support: np.ndarray
    x_query: np.ndarray
    y_query: np.ndarray
    n_tasks: int
    k_support: int
    k_query: int


def meta_learn_cngrad(
    task_sampler: Callable[[np.random.Generator], TaskBatch],
    config: ModelConfig,
    sup_loss: Callable[[Tensor, Tensor], Tensor],
    cfg: TailorConfig,
    iterations: int = 1000,
    seed: int = 0,
    params: MlpParams | None = None,
    sup_loss_per_row: Callable[[Tensor, Tensor], Tensor] | None = None,
) -> tuple[MlpParams, TrainLog]:
    """Few-shot training with one CN row per task.

    Per inner step, the task's CN row is repeated across its k support rows,
    updated on the supervised support loss, then repeated across the k'
    query rows for an outer weight update - applied inside the step loop.
    CN states are severed from the graph between steps.
    """
    if params is None:
        params = init_params(config, seed)
    if sup_loss_per_row is None:
        sup_loss_per_row = _default_per_row_sup
    rng = np.random.default_rng(np.random.SeedSequence((seed, 23)))
    stepper = _OuterStepper(params, cfg.outer_momentum)
    log = TrainLog(seed=seed, mode="metalearn")
    t0 = time.perf_counter()
    for it in range(iterations):
        batch = task_sampler(rng)
        q_loss = _meta_step(batch, config, params, sup_loss, sup_loss_per_row, cfg, stepper)
        _check_divergence(q_loss, it, 0)
        if (it + 1) % max(1, iterations // 50) == 0 or it == iterations - 1:
            log.append(
                EpochRecord(
                    epoch=it,
                    train_loss=q_loss,
                    test_loss=None,
                    tailor_loss_before=None,
                    tailor_loss_after=None,
                    wall_time=time.perf_counter() - t0,
                )
            )
            t0 = time.perf_counter()
    return params, log


def _default_per_row_sup(pred: Tensor, target: Tensor) -> Tensor:
    from .losses import mse_per_row

    return mse_per_row(pred, target)


def _meta_step(
    batch: TaskBatch,
    config: ModelConfig,
    params: MlpParams,
    sup_loss: Callable[[Tensor, Tensor], Tensor],
    sup_loss_per_row: Callable[[Tensor, Tensor], Tensor],
    cfg: TailorConfig,
    stepper: "_OuterStepper | None" = None,
) -> float:
    if stepper is None:
        stepper = _OuterStepper(params, cfg.outer_momentum)
    xs, ys = Tensor(batch.x_support), Tensor(batch.y_support)
    xq, yq = Tensor(batch.x_query), Tensor(batch.y_query)
    cn = identity_cn(batch.n_tasks, config)
    last = 0.0
    for _ in range(cfg.steps):
        support_cn = CnParams(
            _expand_rows(cn.gamma, batch.k_support), _expand_rows(cn.beta, batch.k_support)
        )
        support_pred = forward_cn(config, params, support_cn, xs)
        support_objective = _pooled_objective(
            sup_loss_per_row(support_pred, ys), batch.k_support
        )
        grads = ad.gradient(support_objective, [cn.gamma, cn.beta])
        cn = CnParams(
            ad.sub(cn.gamma, ad.scale(grads[0], cfg.inner_lr)),
            ad.sub(cn.beta, ad.scale(grads[1], cfg.inner_lr)),
        )
        query_cn = CnParams(
            _expand_rows(cn.gamma, batch.k_query), _expand_rows(cn.beta, batch.k_query)
        )
        q = sup_loss(forward_cn(config, params, query_cn, xq), yq)
        last = q.item()
        outer = ad.gradient(q, params.tensors)
        stepper.step(params, [g.data for g in outer], cfg.outer_lr)
        cn = cn.detach()
    return last


def meta_adapt_predict(
    config: ModelConfig,
    params: MlpParams,
    cfg: TailorConfig,
    x_support: np.ndarray,
    y_support: np.ndarray,
    x_query: np.ndarray,
    sup_loss_per_row: Callable[[Tensor, Tensor], Tensor] | None = None,
) -> Tensor:
    """Meta-test for one task: adapt the task's CN row on the support set,
    then predict the queries with it."""
    if sup_loss_per_row is None:
        sup_loss_per_row = _default_per_row_sup
    xs, ys = Tensor(x_support), Tensor(y_support)
    k = x_support.shape[0]
    cn = identity_cn(1, config)
    for _ in range(cfg.steps):
        support_cn = CnParams(_expand_rows(cn.gamma, k), _expand_rows(cn.beta, k))
        pred = forward_cn(config, params, support_cn, xs)
        objective = _pooled_objective(sup_loss_per_row(pred, ys), k)
        grads = ad.gradient(objective, [cn.gamma, cn.beta])
        cn = CnParams(
            ad.sub(cn.gamma, ad.scale(grads[0], cfg.inner_lr)),
            ad.sub(cn.beta, ad.scale(grads[1], cfg.inner_lr)),
        ).detach()
    kq = x_query.shape[0]
    with ad.no_grad():
        query_cn = CnParams(_expand_rows(cn.gamma, kq), _expand_rows(cn.beta, kq))
        return forward_cn(config, params, query_cn, Tensor(x_query))

"""Empirical check that last-layer affine parameters are fully expressive.

For a single-output network, the outputs at a set of augmented inputs are an
affine function of the last hidden layer's (gamma, beta): stacking the
pre-affine activations z at each augmented input gives a linear system
whose matrix has one row [W_out * z(g_i)^T, W_out] per input. When that
matrix has full row rank, any target output vector is reachable by the
last-layer affine parameters alone, so adapting them matches whatever a
joint optimization over all parameters could reach. Full rank holds for all
weight settings outside a measure-zero set provided the augmented inputs
satisfy a simple separation condition; these routines verify both the
condition and the reachability claim numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .net import CnParams, MlpParams, ModelConfig, forward_cn, identity_cn, init_params

RANK_TOLERANCE = 1e-8  # times the largest singular value


@dataclass
class AugmentationSet:
    """Fixed augmented input vectors g_1..g_n for one query."""

    vectors: np.ndarray  # (n_g, input_dim)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ContractViolation("AugmentationSet: vectors must be (n_g, input_dim)")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def random_unit(cls, n_g: int, dim: int, rng: np.random.Generator) -> "AugmentationSet":
        v = rng.normal(size=(n_g, dim))
        return cls(v / np.linalg.norm(v, axis=1, keepdims=True))


def check_condition(aug: AugmentationSet) -> bool:
    """True iff ||g_i||^2 - g_i . g_j > 0 for every ordered pair i != j."""
    g = aug.vectors
    sq = (g**2).sum(axis=1)
    inner = g @ g.T
    diff = sq[:, None] - inner
    np.fill_diagonal(diff, np.inf)
    return bool((diff > 0).all())


@dataclass
class CnLinearSystem:
    """Affine map from stacked [gamma_H; beta_H] to the augmented outputs."""

    matrix: np.ndarray  # (n_g, 2 * m_H)
    offset: float  # output bias, added to every row
    targets: np.ndarray | None = None

    def predict(self, gamma_h: np.ndarray, beta_h: np.ndarray) -> np.ndarray:
        return self.matrix @ np.concatenate([gamma_h, beta_h]) + self.offset


def _last_hidden_preactivation(
    config: ModelConfig, params: MlpParams, x: np.ndarray
) -> np.ndarray:
    """z at the last hidden layer with all lower CN fixed at the identity."""
    with ad.no_grad():
        _, hidden = forward_cn(
            config,
            params,
            identity_cn(x.shape[0], config, requires_grad=False),
            Tensor(x),
            return_hidden=True,
        )
    # Identity CN means the post-affine activations equal z itself.
    return hidden[-1].data


def cn_last_layer_system(
    config: ModelConfig, params: MlpParams, aug: AugmentationSet
) -> CnLinearSystem:
    """Assemble the linear system for the last hidden layer's (gamma, beta)."""
    if config.widths[-1] != 1:
        raise ContractViolation("cn_last_layer_system: needs a single output unit")
    if not config.cn_mask[-1]:
        raise ContractViolation("cn_last_layer_system: last hidden layer must carry CN")
    if config.residual:
        raise ContractViolation("cn_last_layer_system: residual output not supported")
    z = _last_hidden_preactivation(config, params, aug.vectors)  # (n_g, m_H)
    w_out = params.weights[-1].data[0]  # (m_H,)
    matrix = np.concatenate([w_out[None, :] * z, np.tile(w_out, (aug.count, 1))], axis=1)
    return CnLinearSystem(matrix=matrix, offset=float(params.biases[-1].data[0]))


def system_consistency_error(
    config: ModelConfig,
    params: MlpParams,
    aug: AugmentationSet,
    gamma_h: np.ndarray,
    beta_h: np.ndarray,
) -> float:
    """Max |linear-system prediction - network forward| over augmented inputs."""
    system = cn_last_layer_system(config, params, aug)
    predicted = system.predict(gamma_h, beta_h)
    spans = config.cn_offsets()
    start, stop = spans[-1]
    cn = identity_cn(aug.count, config, requires_grad=False)
    cn.gamma.data[:, start:stop] = gamma_h
    cn.beta.data[:, start:stop] = beta_h
    with ad.no_grad():
        actual = forward_cn(config, params, cn, Tensor(aug.vectors)).data[:, 0]
    return float(np.abs(predicted - actual).max())


@dataclass
class ExpressivityResult:
    cn_residual: float
    joint_residual: float
    rank: int
    rank_ok: bool


def expressivity_gap(
    config: ModelConfig,
    params: MlpParams,
    aug: AugmentationSet,
    targets: np.ndarray,
    oracle_restarts: int = 20,
    oracle_steps: int = 2000,
    oracle_lr: float = 0.05,
    oracle_seed: int = 0,
) -> ExpressivityResult:
    """Compare CN-only reachability against a joint-optimization oracle.

    cn_residual is the L2 residual of the least-squares fit of `targets`
    through the last-layer linear system; joint_residual is the best value a
    multi-restart gradient-descent over *all* parameters achieves on the
    same squared-error objective. rank_ok reports whether the system matrix
    has full row rank under an SVD cutoff of 1e-8 times the top singular
    value.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (aug.count,):
        raise ContractViolation("expressivity_gap: one target per augmented input")
    if any(w < aug.count for w in config.hidden_widths):
        raise ContractViolation("expressivity_gap: hidden widths must be >= n_g")

    system = cn_last_layer_system(config, params, aug)
    rhs = targets - system.offset
    solution, _, rank, _ = np.linalg.lstsq(system.matrix, rhs, rcond=RANK_TOLERANCE)
    cn_residual = float(np.linalg.norm(system.matrix @ solution - rhs))
    rank_ok = rank == aug.count

    joint_residual = _joint_descent_oracle(
        config, params, aug, targets, oracle_restarts, oracle_steps, oracle_lr, oracle_seed
    )
    return ExpressivityResult(
        cn_residual=cn_residual,
        joint_residual=joint_residual,
        rank=int(rank),
        rank_ok=rank_ok,
    )


def _joint_descent_oracle(
    config: ModelConfig,
    params: MlpParams,
    aug: AugmentationSet,
    targets: np.ndarray,
    restarts: int,
    steps: int,
    lr: float,
    seed: int,
) -> float:
    """Gradient descent over all parameters and CN values, multi-restart.

    Approximates the joint infimum from above; the reported value is the
    best L2 residual reached.
    """
    from .errors import NumericFault

    x = Tensor(aug.vectors)
    t = ad.constant(targets[:, None])
    seed_rng = np.random.default_rng(np.random.SeedSequence((seed, 7)))
    best = np.inf
    for restart in range(restarts):
        trial = (
            params.copy()
            if restart == 0
            else init_params(config, seed=int(seed_rng.integers(2**31)))
        )
        cn = identity_cn(aug.count, config)
        tensors = trial.tensors + [cn.gamma, cn.beta]
        try:
            for _ in range(steps):
                diff = ad.sub(forward_cn(config, trial, cn, x), t)
                sse = ad.sum_all(ad.mul(diff, diff))
                grads = ad.gradient(sse, tensors)
                for tensor, grad in zip(tensors, grads):
                    tensor.data -= lr * grad.data
            with ad.no_grad():
                diff = ad.sub(forward_cn(config, trial, cn, x), t)
                best = min(best, float(np.sqrt(ad.sum_all(ad.mul(diff, diff)).item())))
        except NumericFault:
            continue  # this restart diverged; it cannot improve the bound
    return best


def corollary_rank_survey(
    config: ModelConfig,
    aug: AugmentationSet,
    n_draws: int = 100,
    noise_std: float = 0.1,
    seed: int = 0,
) -> dict:
    """Sample the probability-one full-rank claim over perturbed weights.

    Draws base weights once, then adds fresh Gaussian noise per draw and
    records the rank of the resulting linear system plus the least-squares
    residual against random targets.
    """
    base = init_params(config, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
    ranks_ok = 0
    residuals = []
    for _ in range(n_draws):
        perturbed = base.copy()
        for tensor in perturbed.tensors:
            tensor.data += rng.normal(0.0, noise_std, size=tensor.shape)
        system = cn_last_layer_system(config, perturbed, aug)
        svals = np.linalg.svd(system.matrix, compute_uv=False)
        rank = int((svals > RANK_TOLERANCE * svals[0]).sum()) if svals[0] > 0 else 0
        targets = rng.normal(size=aug.count)
        rhs = targets - system.offset
        sol, _, _, _ = np.linalg.lstsq(system.matrix, rhs, rcond=RANK_TOLERANCE)
        residuals.append(float(np.linalg.norm(system.matrix @ sol - rhs)))
        if rank == aug.count:
            ranks_ok += 1
    residuals = np.array(residuals)
    return {
        "draws": n_draws,
        "rank_ok": ranks_ok,
        "rank_ok_rate": ranks_ok / n_draws,
        "residual_quantiles": {
            "q50": float(np.quantile(residuals, 0.5)),
            "q90": float(np.quantile(residuals, 0.9)),
            "max": float(residuals.max()),
        },
    }

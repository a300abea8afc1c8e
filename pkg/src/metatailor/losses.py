"""Supervised, auxiliary, and per-query adaptation losses.

The physical losses operate on raw (denormalized) states: energy and
momentum are only meaningful in physical units, so normalized inputs are
mapped back through the dataset statistics before any invariant is computed.

Each adaptation loss comes in two forms: the scalar batch mean (the public
op) and a per-row vector used by the adaptation engine, which needs to pool
rows into groups without coupling unrelated queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

N_BODIES = 5
STATE_DIM = 5 * N_BODIES  # per body: x, y, vx, vy, m
MOMENTUM_WEIGHT = 10.0  # balances momentum against energy magnitudes
MIN_SEPARATION = 1e-6  # raw length units; guards the collision regime


@dataclass
class NormStats:
    """Per-dimension normalization statistics (computed on the train split)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ContractViolation("NormStats: mean/std must be equal-length vectors")
        if np.any(self.std <= 0):
            raise ContractViolation("NormStats: std must be positive in every dimension")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.mean) / self.std

    def denormalize(self, normed: np.ndarray) -> np.ndarray:
        return normed * self.std + self.mean

    def denormalize_tensor(self, t: Tensor) -> Tensor:
        rows = t.shape[0]
        std = ad.constant(np.tile(self.std, (rows, 1)))
        mean = ad.constant(np.tile(self.mean, (rows, 1)))
        return ad.add(ad.mul(t, std), mean)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


# -- supervised loss -----------------------------------------------------------


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all entries."""
    if pred.shape != target.shape:
        raise ContractViolation(f"mse: shapes {pred.shape} vs {target.shape}")
    d = ad.sub(pred, target)
    return ad.mean_all(ad.mul(d, d))


def mse_per_row(pred: Tensor, target: Tensor) -> Tensor:
    """Row-wise mean squared error, shape (rows, 1)."""
    if pred.shape != target.shape:
        raise ContractViolation(f"mse_per_row: shapes {pred.shape} vs {target.shape}")
    d = ad.sub(pred, target)
    return ad.scale(_row_sum(ad.mul(d, d)), 1.0 / pred.shape[1])


def _row_sum(t: Tensor) -> Tensor:
    """(b, d) -> (b, 1) row sums via the transposed column reduction."""
    return ad.transpose(ad.sum_rows(ad.transpose(t)))


# -- N-body invariants ---------------------------------------------------------
#
# Field extraction and pairwise differencing are constant linear maps, so
# they compile to a few matmuls against precomputed selector matrices
# instead of per-body column slicing.


def _field_selector(offset: int) -> np.ndarray:
    s = np.zeros((STATE_DIM, N_BODIES))
    for i in range(N_BODIES):
        s[5 * i + offset, i] = 1.0
    return s

_SEL_X, _SEL_Y, _SEL_VX, _SEL_VY, _SEL_M = (_field_selector(j) for j in range(5))

_PAIRS = [(i, j) for i in range(N_BODIES) for j in range(i + 1, N_BODIES)]
_PAIR_DIFF = np.zeros((N_BODIES, len(_PAIRS)))  # body -> pair difference map
_PAIR_I = np.zeros((N_BODIES, len(_PAIRS)))
_PAIR_J = np.zeros((N_BODIES, len(_PAIRS)))
for _p, (_i, _j) in enumerate(_PAIRS):
    _PAIR_DIFF[_i, _p], _PAIR_DIFF[_j, _p] = 1.0, -1.0
    _PAIR_I[_i, _p] = 1.0
    _PAIR_J[_j, _p] = 1.0


def _fields(states: Tensor):
    pick = lambda sel: ad.matmul(states, ad.constant(sel))
    return pick(_SEL_X), pick(_SEL_Y), pick(_SEL_VX), pick(_SEL_VY), pick(_SEL_M)


def system_energy(states: Tensor, g_const: float) -> Tensor:
    """Total mechanical energy of each row of a (b, 25) raw state batch."""
    x, y, vx, vy, m = _fields(states)
    speed2 = ad.add(ad.mul(vx, vx), ad.mul(vy, vy))
    kinetic = ad.scale(_row_sum(ad.mul(m, speed2)), 0.5)
    diff = ad.constant(_PAIR_DIFF)
    dx = ad.matmul(x, diff)
    dy = ad.matmul(y, diff)
    dist = ad.sqrt(ad.clip_min(ad.add(ad.mul(dx, dx), ad.mul(dy, dy)), MIN_SEPARATION**2))
    mm = ad.mul(ad.matmul(m, ad.constant(_PAIR_I)), ad.matmul(m, ad.constant(_PAIR_J)))
    potential = ad.scale(_row_sum(ad.div(mm, dist)), g_const)
    return ad.sub(kinetic, potential)


def system_momentum(states: Tensor) -> tuple[Tensor, Tensor]:
    """Total momentum (px, py) of each row of a (b, 25) raw state batch."""
    _, _, vx, vy, m = _fields(states)
    return _row_sum(ad.mul(m, vx)), _row_sum(ad.mul(m, vy))


def invariants_of(state: Tensor | np.ndarray, g_const: float) -> tuple[Tensor, Tensor]:
    """Energy and momentum of a single flat 25-dimensional raw state.

    Returns a scalar energy tensor and a (1, 2) momentum tensor; both are
    differentiable when `state` tracks gradients.
    """
    t = state if isinstance(state, Tensor) else Tensor(state)
    if t.data.size != STATE_DIM:
        raise ContractViolation(f"invariants_of: expected {STATE_DIM} values, got {t.data.size}")
    rows = ad.reshape(t, (1, STATE_DIM))
    energy = ad.reshape(system_energy(rows, g_const), ())
    px, py = system_momentum(rows)
    momentum = ad.reshape(ad.add(ad.embed_cols(px, 0, 2), ad.embed_cols(py, 1, 2)), (1, 2))
    return energy, momentum


_MASS_MASK = np.zeros(STATE_DIM)
_MASS_MASK[4::5] = 1.0


def substitute_masses(target_of_masses: Tensor, source: Tensor) -> Tensor:
    """Overwrite the mass slots of `target_of_masses` with those of `source`.

    Masses are constants of motion; the state layout carries them only for
    symmetry, and letting a predicted mass float would let an adaptation
    loss be gamed through mass edits.
    """
    rows = source.shape[0]
    mask = ad.constant(np.tile(_MASS_MASK, (rows, 1)))
    inv = ad.constant(np.tile(1.0 - _MASS_MASK, (rows, 1)))
    return ad.add(ad.mul(target_of_masses, inv), ad.mul(source, mask))


def conservation_tailor_loss_per_row(
    x_norm: Tensor, yhat_norm: Tensor, stats: NormStats, g_const: float
) -> Tensor:
    """Per-row conservation violation |dE| + 10*(|dpx| + |dpy|), shape (b, 1)."""
    if x_norm.shape != yhat_norm.shape or x_norm.shape[1] != STATE_DIM:
        raise ContractViolation(
            f"conservation loss: shapes {x_norm.shape} vs {yhat_norm.shape}"
        )
    if stats.dim != STATE_DIM:
        raise ContractViolation("conservation loss: stats dimension mismatch")
    x_raw = stats.denormalize_tensor(x_norm)
    y_raw = substitute_masses(stats.denormalize_tensor(yhat_norm), x_raw)
    de = ad.abs_(ad.sub(system_energy(x_raw, g_const), system_energy(y_raw, g_const)))
    pxx, pxy = system_momentum(x_raw)
    pyx, pyy = system_momentum(y_raw)
    dp = ad.add(ad.abs_(ad.sub(pxx, pyx)), ad.abs_(ad.sub(pxy, pyy)))
    return ad.add(de, ad.scale(dp, MOMENTUM_WEIGHT))


def conservation_tailor_loss(
    x_norm: Tensor, yhat_norm: Tensor, stats: NormStats, g_const: float
) -> Tensor:
    """Batch mean of the per-row conservation violation."""
    return ad.mean_all(conservation_tailor_loss_per_row(x_norm, yhat_norm, stats, g_const))


# -- pendulum ------------------------------------------------------------------


@dataclass
class PendulumParams:
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 3.0
    damping: float = 0.0

    def energy(self, theta: np.ndarray, omega: np.ndarray) -> np.ndarray:
        return (
            0.5 * self.mass * self.length**2 * omega**2
            + self.mass * self.gravity * self.length * (1.0 - np.cos(theta))
        )


def _pendulum_energy(rows: Tensor, p: PendulumParams) -> Tensor:
    theta = ad.slice_cols(rows, 0, 1)
    omega = ad.slice_cols(rows, 1, 2)
    one = ad.constant(np.ones_like(theta.data))
    kinetic = ad.scale(ad.mul(omega, omega), 0.5 * p.mass * p.length**2)
    potential = ad.scale(ad.sub(one, ad.cos(theta)), p.mass * p.gravity * p.length)
    return ad.add(kinetic, potential)


def pendulum_energy_loss_per_row(x: Tensor, yhat: Tensor, params: PendulumParams) -> Tensor:
    """|E(prediction) - E(input)| per row for (theta, omega) states."""
    if x.shape != yhat.shape or x.shape[1] != 2:
        raise ContractViolation(f"pendulum loss: shapes {x.shape} vs {yhat.shape}")
    return ad.abs_(ad.sub(_pendulum_energy(yhat, params), _pendulum_energy(x, params)))


def pendulum_energy_loss(x: Tensor, yhat: Tensor, params: PendulumParams) -> Tensor:
    return ad.mean_all(pendulum_energy_loss_per_row(x, yhat, params))


# -- feature smoothness ----------------------------------------------------------


def smoothness_tailor_loss_per_row(
    penultimate_fn,
    x: Tensor,
    nu: float,
    n_samples: int,
    seed: int,
) -> Tensor:
    """Mean cosine distance between features at x and at Gaussian perturbations.

    `penultimate_fn` maps a (b, d) input tensor to its (b, f) penultimate
    feature rows under the current parameters. Perturbations are drawn
    deterministically from `seed`; with nu -> 0 the loss vanishes.
    """
    if nu < 0:
        raise ContractViolation("smoothness loss: nu must be nonnegative")
    if n_samples < 1:
        raise ContractViolation("smoothness loss: need at least one sample")
    rng = np.random.default_rng(seed)
    feats = penultimate_fn(x)
    base_norm = _row_norm(feats)
    total = None
    for _ in range(n_samples):
        delta = rng.normal(0.0, 1.0, size=x.shape) * nu
        perturbed = penultimate_fn(ad.add(x, ad.constant(delta)))
        dot = _row_sum(ad.mul(feats, perturbed))
        cosine = ad.div(dot, ad.clip_min(ad.mul(base_norm, _row_norm(perturbed)), 1e-12))
        one = ad.constant(np.ones_like(cosine.data))
        dist = ad.sub(one, cosine)
        total = dist if total is None else ad.add(total, dist)
    return ad.scale(total, 1.0 / n_samples)


def smoothness_tailor_loss(penultimate_fn, x: Tensor, nu: float, n_samples: int, seed: int) -> Tensor:
    return ad.mean_all(smoothness_tailor_loss_per_row(penultimate_fn, x, nu, n_samples, seed))


def _row_norm(t: Tensor) -> Tensor:
    return ad.sqrt(ad.clip_min(_row_sum(ad.mul(t, t)), 1e-24))


# -- auxiliary objective ---------------------------------------------------------


def aux_regularized_loss(sup: Tensor, phys: Tensor, weight: float) -> Tensor:
    """Supervised loss plus `weight` times the physics penalty."""
    if sup.shape != () or phys.shape != ():
        raise ContractViolation("aux_regularized_loss: both terms must be scalars")
    return ad.add(sup, ad.scale(phys, weight))


# -- adapters for the adaptation engine --------------------------------------------
#
# The engine consumes inner losses of the form (model, x) -> per-row column,
# where `model` forwards under the CN state being adapted.


def conservation_inner(stats: NormStats, g_const: float):
    def inner(model, x: Tensor) -> Tensor:
        return conservation_tailor_loss_per_row(x, model(x), stats, g_const)

    return inner


def pendulum_inner(params: PendulumParams):
    def inner(model, x: Tensor) -> Tensor:
        return pendulum_energy_loss_per_row(x, model(x), params)

    return inner


def smoothness_inner(nu: float, n_samples: int, seed: int):
    def inner(model, x: Tensor) -> Tensor:
        return smoothness_tailor_loss_per_row(model.penultimate, x, nu, n_samples, seed)

    return inner

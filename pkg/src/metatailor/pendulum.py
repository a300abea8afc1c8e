"""Damped pendulum simulation and dataset assembly.

The pendulum provides a small regression task whose energy is only
approximately conserved (damping bleeds it off), which is exactly the regime
where softly encouraging conservation at prediction time should help. States
are (angle, angular velocity) pairs in raw units; no normalization is
applied.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ContractViolation
from .losses import PendulumParams


def pendulum_rhs(theta: np.ndarray, omega: np.ndarray, p: PendulumParams):
    return omega, -(p.gravity / p.length) * np.sin(theta) - p.damping * omega


def simulate_pendulum(
    params: PendulumParams,
    dt: float,
    n_steps: int,
    theta0: float,
    omega0: float,
) -> np.ndarray:
    """RK4 trajectory of (theta, omega), shape (n_steps + 1, 2)."""
    if params.damping < 0:
        raise ContractViolation("simulate_pendulum: damping must be nonnegative")
    if dt <= 0 or n_steps < 0:
        raise ContractViolation("simulate_pendulum: bad dt or step count")
    out = np.empty((n_steps + 1, 2))
    out[0] = (theta0, omega0)
    th, om = float(theta0), float(omega0)
    for k in range(1, n_steps + 1):
        k1t, k1o = pendulum_rhs(th, om, params)
        k2t, k2o = pendulum_rhs(th + 0.5 * dt * k1t, om + 0.5 * dt * k1o, params)
        k3t, k3o = pendulum_rhs(th + 0.5 * dt * k2t, om + 0.5 * dt * k2o, params)
        k4t, k4o = pendulum_rhs(th + dt * k3t, om + dt * k3o, params)
        th += dt / 6.0 * (k1t + 2 * k2t + 2 * k3t + k4t)
        om += dt / 6.0 * (k1o + 2 * k2o + 2 * k3o + k4o)
        out[k] = (th, om)
    return out


@dataclass
class PendulumDataConfig:
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 3.0
    damping: float = 0.05
    dt: float = 0.1
    n_steps: int = 150
    n_trajectories: int = 20
    theta_range: tuple[float, float] = (0.5, 2.2)
    omega_range: tuple[float, float] = (-0.5, 0.5)
    train_fraction: float = 0.8
    seed: int = 0

    @property
    def params(self) -> PendulumParams:
        return PendulumParams(self.mass, self.length, self.gravity, self.damping)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PendulumDataset:
    config: PendulumDataConfig
    trajectories: np.ndarray  # (n, n_steps + 1, 2)
    train_idx: np.ndarray
    test_idx: np.ndarray

    def _pairs(self, idx):
        xs = self.trajectories[idx, :-1, :].reshape(-1, 2)
        ys = self.trajectories[idx, 1:, :].reshape(-1, 2)
        return xs, ys

    @property
    def train_pairs(self):
        return self._pairs(self.train_idx)

    @property
    def test_pairs(self):
        return self._pairs(self.test_idx)


def build_pendulum_dataset(cfg: PendulumDataConfig, seed: int | None = None) -> PendulumDataset:
    """Simulate trajectories from random initial swings and split by trajectory."""
    if cfg.n_trajectories < 2:
        raise ContractViolation("build_pendulum_dataset: need at least 2 trajectories")
    if seed is None:
        seed = cfg.seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    sign = lambda: rng.choice([-1.0, 1.0])
    trajs = []
    for _ in range(cfg.n_trajectories):
        theta0 = sign() * rng.uniform(*cfg.theta_range)
        omega0 = rng.uniform(*cfg.omega_range)
        trajs.append(simulate_pendulum(cfg.params, cfg.dt, cfg.n_steps, theta0, omega0))
    trajectories = np.stack(trajs)
    order = rng.permutation(cfg.n_trajectories)
    n_train = max(1, min(int(round(cfg.train_fraction * cfg.n_trajectories)), cfg.n_trajectories - 1))
    return PendulumDataset(cfg, trajectories, np.sort(order[:n_train]), np.sort(order[n_train:]))

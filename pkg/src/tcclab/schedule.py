"""Linear-beta noise schedule and deterministic (eta = 0) DDIM stepping.

Step indices follow the reverse convention: with ``n_steps`` sampling steps the
first denoising step is ``n_steps - 1`` and the last one is ``0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import DenoiserConfig, LatentState
from .linalg import SeededRng


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int
    beta_start: float
    beta_end: float
    alpha_bar: np.ndarray
    sample_steps: tuple[int, ...]  # training timesteps, strictly decreasing

    @property
    def n_steps(self) -> int:
        return len(self.sample_steps)

    def step_indices(self) -> range:
        """Reverse step indices in sampling order: n_steps-1, ..., 0."""
        return range(self.n_steps - 1, -1, -1)

    def check_step(self, step_index: int) -> None:
        if not 0 <= step_index < self.n_steps:
            raise ValueError(f"step index {step_index} outside schedule of {self.n_steps} steps")

    def timestep(self, step_index: int) -> int:
        self.check_step(step_index)
        return self.sample_steps[self.n_steps - 1 - step_index]

    def abar(self, step_index: int) -> float:
        return float(self.alpha_bar[self.timestep(step_index)])

    def abar_prev(self, step_index: int) -> float:
        # The final step lands on the clean sample, abar = 1.
        self.check_step(step_index)
        if step_index == 0:
            return 1.0
        return self.abar(step_index - 1)


def build_schedule(t_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
                   n_steps: int = 20) -> NoiseSchedule:
    if t_train < 1:
        raise ValueError(f"t_train must be positive, got {t_train}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= n_steps <= t_train:
        raise ValueError(f"need 1 <= n_steps <= t_train, got n_steps={n_steps}")
    betas = np.linspace(beta_start, beta_end, t_train)
    alpha_bar = np.cumprod(1.0 - betas)
    alpha_bar.flags.writeable = False
    if n_steps == 1:
        steps = (t_train - 1,)
    else:
        # Integer spacing keeps the index set exact: t_j = floor((t_train-1) * j / (n_steps-1)).
        steps = tuple(((t_train - 1) * j) // (n_steps - 1) for j in range(n_steps - 1, -1, -1))
    return NoiseSchedule(t_train, float(beta_start), float(beta_end), alpha_bar, steps)


def ddim_step(x_t: np.ndarray, eps_pred: np.ndarray, abar_t: float, abar_prev: float) -> np.ndarray:
    if not (0.0 < abar_t <= 1.0 and 0.0 < abar_prev <= 1.0):
        raise ValueError(f"alpha-bar values must lie in (0, 1], got {abar_t}, {abar_prev}")
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(eps_pred))):
        raise ValueError("non-finite input to ddim_step")
    x0_pred = (x_t - np.sqrt(1.0 - abar_t) * eps_pred) / np.sqrt(abar_t)
    return np.sqrt(abar_prev) * x0_pred + np.sqrt(1.0 - abar_prev) * eps_pred


def init_latent(rng: SeededRng, cfg: DenoiserConfig, condition_id: int) -> LatentState:
    """x_T as i.i.d. standard normals (Box-Muller on the SplitMix64 stream)."""
    if not 0 <= condition_id < cfg.n_conditions:
        raise ValueError(f"condition_id {condition_id} outside [0, {cfg.n_conditions})")
    return LatentState(rng.normal_matrix(cfg.n_tokens, cfg.d_model), condition_id)

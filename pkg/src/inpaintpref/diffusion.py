"""DDPM: noise schedule, forward corruption, epsilon-prediction loss and the
ancestral sampler.

The denoiser is an MLP whose input is laid out as

    [x_t | masked image | mask | one-hot(label) | time features]

with the masked image in model space ([-1, 1]) and four time features
``(tau, sin 2πtau, cos 2πtau, sin 4πtau)``, ``tau = t / T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, NonFiniteError, SamplerAbort, ShapeError
from .nn import MlpParams, mlp_forward, mse_per_sample
from .toyworld import InpaintTask, blend, from_model_space, masked_view, to_model_space

N_TIME_FEATURES = 4


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # betas[t - 1] for t = 1..T

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[t]`` for t = 0..T, with ``alpha_bar[0] = 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])


DEFAULT_T = 50
DEFAULT_BETA_START = 1e-4
# With only 50 steps, ending at 0.02 leaves alpha_bar_T near 0.6, far from the N(0, I)
# the sampler starts from. Ending at 0.1 gives about 0.075 while keeping the noise
# injected in the last steps small.
DEFAULT_BETA_END = 0.1


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 1:
        raise InvalidArgument(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidArgument(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


# --- conditioning -----------------------------------------------------------

def time_features(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    two_pi = 2.0 * np.pi
    return np.stack([tau, np.sin(two_pi * tau), np.cos(two_pi * tau),
                     np.sin(2 * two_pi * tau)], axis=-1)


def static_condition(task: InpaintTask, K: int) -> np.ndarray:
    """The per-task part of the denoiser input: masked image, mask, one-hot."""
    if not 0 <= task.label < K:
        raise InvalidArgument(f"label {task.label} outside [0, {K})")
    onehot = np.zeros(K)
    onehot[task.label] = 1.0
    return np.concatenate([to_model_space(masked_view(task)), task.mask.ravel(), onehot])


def static_conditions(tasks: Sequence[InpaintTask], K: int) -> np.ndarray:
    return np.stack([static_condition(t, K) for t in tasks])


def infer_num_classes(params: MlpParams, height: int, width: int) -> int:
    d = 3 * height * width
    K = params.input_dim - 2 * d - height * width - N_TIME_FEATURES
    if K < 1 or params.output_dim != d:
        raise ShapeError(
            f"network dims {params.dims} do not fit {height}x{width} images")
    return K


def denoiser_input_dim(height: int, width: int, K: int) -> int:
    return 2 * 3 * height * width + height * width + K + N_TIME_FEATURES


def cond_input(x_t: np.ndarray, static: np.ndarray, tau) -> np.ndarray:
    return np.concatenate([x_t, static, time_features(tau)], axis=-1)


# --- forward process and loss ----------------------------------------------

def _check_t(t, T: int) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > T) or np.any(t != np.round(t)):
        raise InvalidArgument(f"timestep must be an integer in [0, {T}], got {t}")
    return t.astype(np.int64)


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` may be a vector for a batch."""
    t = _check_t(t, sched.T)
    ab = sched.alpha_bar[t]
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddpm_batch_losses(params: MlpParams, static: np.ndarray, x0: np.ndarray, t: np.ndarray,
                      eps: np.ndarray, sched: NoiseSchedule,
                      weights: np.ndarray | None = None, need_grads: bool = True):
    """Per-sample ``mean((eps - eps_theta(x_t))^2)`` over a batch, with the
    gradient of ``sum(weights * losses)``."""
    t = _check_t(t, sched.T)
    if np.any(t < 1):
        raise InvalidArgument("training timesteps must be >= 1")
    x_t = forward_diffuse(x0, t, eps, sched)
    inputs = cond_input(x_t, static, t / sched.T)
    losses, grads = mse_per_sample(params, inputs, eps, weights, need_grads)
    if not np.all(np.isfinite(losses)):
        raise NonFiniteError("non-finite DDPM loss")
    return losses, grads


def ddpm_loss(params: MlpParams, task: InpaintTask, x0: np.ndarray, t: int, eps: np.ndarray,
              sched: NoiseSchedule):
    """Single-task DDPM loss and parameter gradients."""
    K = infer_num_classes(params, task.height, task.width)
    losses, grads = ddpm_batch_losses(
        params, static_condition(task, K)[None], np.asarray(x0)[None], np.array([t]),
        np.asarray(eps)[None], sched)
    return float(losses[0]), grads


# --- sampling ---------------------------------------------------------------

def posterior_coefficients(sched: NoiseSchedule, t: int):
    """Coefficients of the posterior mean ``c0 * x0 + ct * x_t`` at step t."""
    ab = sched.alpha_bar
    beta = sched.betas[t - 1]
    c0 = np.sqrt(ab[t - 1]) * beta / (1.0 - ab[t])
    ct = np.sqrt(1.0 - beta) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
    return c0, ct


def ddpm_sample_batch(params: MlpParams, tasks: Sequence[InpaintTask], seeds: Sequence[int],
                      sched: NoiseSchedule, clamp_x0: bool = True,
                      candidate_ids: Sequence[int] | None = None) -> list[np.ndarray]:
    """Ancestral sampling for several tasks at once; sample i draws all of its
    noise from ``default_rng(seeds[i])``. Outputs are blended pixel images."""
    if len(tasks) != len(seeds):
        raise InvalidArgument("need one seed per task")
    if not tasks:
        return []
    h, w = tasks[0].height, tasks[0].width
    K = infer_num_classes(params, h, w)
    static = static_conditions(tasks, K)
    rngs = [np.random.default_rng(s) for s in seeds]
    x = np.stack([r.standard_normal(3 * h * w) for r in rngs])
    ab = sched.alpha_bar
    for t in range(sched.T, 0, -1):
        eps_hat = mlp_forward(params, cond_input(x, static, np.full(len(tasks), t / sched.T)))
        x0_hat = (x - np.sqrt(1.0 - ab[t]) * eps_hat) / np.sqrt(ab[t])
        if clamp_x0:
            x0_hat = np.clip(x0_hat, -1.0, 1.0)
        c0, ct = posterior_coefficients(sched, t)
        x = c0 * x0_hat + ct * x
        if t > 1:
            sigma = np.sqrt(sched.betas[t - 1])
            x = x + sigma * np.stack([r.standard_normal(x.shape[1]) for r in rngs])
        _check_finite_state(x, t, tasks, candidate_ids)
    return [blend(from_model_space(xi, h, w), task.source, task.mask)
            for xi, task in zip(x, tasks)]


def ddpm_sample(params: MlpParams, task: InpaintTask, sched: NoiseSchedule, seed: int,
                clamp_x0: bool = True) -> np.ndarray:
    return ddpm_sample_batch(params, [task], [seed], sched, clamp_x0)[0]


def _check_finite_state(x: np.ndarray, step, tasks, candidate_ids) -> None:
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        cand = None if candidate_ids is None else candidate_ids[i]
        raise SamplerAbort(
            f"non-finite sampler state at step {step} (task {tasks[i].task_id}"
            + ("" if cand is None else f", candidate {cand}") + ")",
            step=step, task_id=tasks[i].task_id, candidate_idx=cand)

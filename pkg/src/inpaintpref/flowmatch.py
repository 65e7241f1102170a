"""Flow matching on the linear path ``x_t = (1 - t) x0 + t eps``.

t = 1 is pure noise. The velocity network shares the denoiser input layout of
:mod:`inpaintpref.diffusion` with ``tau = t``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .diffusion import (
    _check_finite_state,
    cond_input,
    infer_num_classes,
    static_condition,
    static_conditions,
)
from .errors import InvalidArgument, NonFiniteError
from .nn import MlpParams, mlp_forward, mse_per_sample
from .toyworld import InpaintTask, blend, from_model_space

DEFAULT_STEPS = 25


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise InvalidArgument(f"flow time must lie in [0, 1], got {t}")
    return t


def fm_interpolate(x0: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    t = _check_time(t)
    if t.ndim:
        t = t[:, None]
    return (1.0 - t) * x0 + t * eps


def fm_batch_losses(params: MlpParams, static: np.ndarray, x0: np.ndarray, t: np.ndarray,
                    eps: np.ndarray, weights: np.ndarray | None = None,
                    need_grads: bool = True):
    """Per-sample ``mean((v_theta(x_t) - (eps - x0))^2)`` and the gradient of
    ``sum(weights * losses)``."""
    t = _check_time(t)
    x_t = fm_interpolate(x0, eps, t)
    losses, grads = mse_per_sample(params, cond_input(x_t, static, t), eps - x0,
                                   weights, need_grads)
    if not np.all(np.isfinite(losses)):
        raise NonFiniteError("non-finite flow-matching loss")
    return losses, grads


def fm_loss(params: MlpParams, task: InpaintTask, x0: np.ndarray, t: float, eps: np.ndarray):
    K = infer_num_classes(params, task.height, task.width)
    losses, grads = fm_batch_losses(params, static_condition(task, K)[None],
                                    np.asarray(x0)[None], np.array([t]), np.asarray(eps)[None])
    return float(losses[0]), grads


def euler_integrate(velocity: Callable[[np.ndarray, float], np.ndarray], x1: np.ndarray,
                    steps: int, on_step: Callable[[np.ndarray, int], None] | None = None
                    ) -> np.ndarray:
    """Integrate from t = 1 to t = 0 with ``steps`` uniform Euler steps."""
    if steps < 1:
        raise InvalidArgument(f"need at least one integration step, got {steps}")
    dt = 1.0 / steps
    x = x1
    for k in range(steps):
        x = x - dt * velocity(x, 1.0 - k * dt)
        if on_step is not None:
            on_step(x, k)
    return x


def fm_sample_batch(params: MlpParams, tasks: Sequence[InpaintTask], seeds: Sequence[int],
                    steps: int = DEFAULT_STEPS,
                    candidate_ids: Sequence[int] | None = None) -> list[np.ndarray]:
    if len(tasks) != len(seeds):
        raise InvalidArgument("need one seed per task")
    if not tasks:
        return []
    h, w = tasks[0].height, tasks[0].width
    K = infer_num_classes(params, h, w)
    static = static_conditions(tasks, K)
    x1 = np.stack([np.random.default_rng(s).standard_normal(3 * h * w) for s in seeds])
    n = len(tasks)

    def velocity(x, t):
        return mlp_forward(params, cond_input(x, static, np.full(n, t)))

    def check(x, k):
        _check_finite_state(x, k, tasks, candidate_ids)

    x0 = euler_integrate(velocity, x1, steps, check)
    return [blend(from_model_space(xi, h, w), task.source, task.mask)
            for xi, task in zip(x0, tasks)]


def fm_sample(params: MlpParams, task: InpaintTask, steps: int = DEFAULT_STEPS,
              seed: int = 0) -> np.ndarray:
    return fm_sample_batch(params, [task], [seed], steps)[0]

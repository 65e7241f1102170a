"""Supervised pretraining and DPO fine-tuning of the denoiser.

The DPO objective compares the policy's denoising loss against a frozen
reference on the preferred and dispreferred image of each pair:

    loss = -log sigmoid(-beta * ((Lp_w - Lr_w) - (Lp_l - Lr_l)))

with one shared time draw per pair and independent noise per image.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffusion import (
    DEFAULT_BETA_END,
    DEFAULT_BETA_START,
    DEFAULT_T,
    NoiseSchedule,
    infer_num_classes,
    make_schedule,
    static_condition,
    static_conditions,
)
from .errors import InpaintPrefError, InvalidArgument, NonFiniteError, TagMismatch
from .models import (
    DEFAULT_HIDDEN,
    Checkpoint,
    check_tag,
    config_hash,
    draw_times,
    inner_losses,
    new_checkpoint,
    quantize,
)
from .nn import LossTrace, MlpParams, adam_init, adam_update_
from .prefdata import PreferenceDataset, PreferencePair
from .seeding import rng as derived_rng
from .toyworld import InpaintTask, to_model_space

log = logging.getLogger(__name__)

FULL_SCALE_LR = 1e-7
FULL_SCALE_BETA_GRID = (2000.0, 4000.0, 8000.0)
FULL_SCALE_LR_GRID = (1e-7, 1e-6, 1e-5)


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 2000.0
    lr: float = 1e-5
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidArgument(f"beta must be positive, got {self.beta}")
        if self.steps < 0:
            raise InvalidArgument(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1 or not self.lr > 0:
            raise InvalidArgument("batch_size must be >= 1 and lr positive")

    @classmethod
    def full_scale(cls, **overrides) -> "DpoConfig":
        """The full-scale defaults (lr 1e-7, beta 2000, 2000 steps)."""
        return cls(**{"lr": FULL_SCALE_LR, **overrides})


@dataclass(frozen=True)
class SftConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 64
    hidden: tuple[int, ...] = ()  # empty: the generator's default width
    seed: int = 0
    T: int = DEFAULT_T
    K: int | None = None  # default: 1 + largest label seen
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END


# --- DPO loss -----------------------------------------------------------------

def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def dpo_batch_loss(policy: MlpParams, reference: MlpParams, tag: str, static: np.ndarray,
                   x_w: np.ndarray, x_l: np.ndarray, t: np.ndarray, eps_w: np.ndarray,
                   eps_l: np.ndarray, beta: float, schedule: NoiseSchedule):
    """Mean DPO loss over a batch of pairs and its gradient w.r.t. the policy.

    Returns ``(loss, grads, inner)`` where ``inner`` is the per-pair
    ``(Lp_w - Lr_w) - (Lp_l - Lr_l)``.
    """
    n = len(x_w)
    static2 = np.concatenate([static, static])
    x0 = np.concatenate([x_w, x_l])
    t2 = np.concatenate([t, t])
    eps = np.concatenate([eps_w, eps_l])
    ref_losses, _ = inner_losses(reference, tag, static2, x0, t2, eps, schedule,
                                 need_grads=False)
    out = {}

    def pair_weights(pol_losses):
        diff = pol_losses - ref_losses
        inner = diff[:n] - diff[n:]
        z = beta * inner
        out["inner"], out["losses"] = inner, np.logaddexp(0.0, z)  # -log sigmoid(-z)
        coef = beta * np.exp(log_sigmoid(z)) / n
        return np.concatenate([coef, -coef])

    _, grads = inner_losses(policy, tag, static2, x0, t2, eps, schedule, weights=pair_weights)
    losses, inner = out["losses"], out["inner"]
    if not np.all(np.isfinite(losses)):
        raise NonFiniteError("non-finite DPO loss")
    return float(np.mean(losses)), grads, inner


def dpo_pair_loss(policy: MlpParams, reference: MlpParams, pair: PreferencePair,
                  task: InpaintTask, t_draw, eps_w: np.ndarray, eps_l: np.ndarray,
                  beta: float, generator_tag: str, schedule: NoiseSchedule | None = None):
    """DPO loss for one pair. ``t_draw`` is shared by all four inner losses."""
    check_tag(generator_tag)
    if schedule is None:
        schedule = make_schedule()
    K = infer_num_classes(policy, task.height, task.width)
    static = static_condition(task, K)[None]
    loss, grads, _ = dpo_batch_loss(
        policy, reference, generator_tag, static, to_model_space(pair.preferred)[None],
        to_model_space(pair.dispreferred)[None], np.array([t_draw]), np.asarray(eps_w)[None],
        np.asarray(eps_l)[None], beta, schedule)
    return loss, grads


# --- training loops -------------------------------------------------------------

def _check_finite(loss: float, step: int, what: str) -> None:
    if not np.isfinite(loss):
        raise NonFiniteError(f"{what}: non-finite loss at step {step}")


def pretrain_sft(tasks: Sequence[InpaintTask], generator_tag: str,
                 config: SftConfig = SftConfig(),
                 on_step: Callable[[int, float], None] | None = None):
    """Fit the denoiser to the task sources with the plain generative loss.

    Returns ``(checkpoint, trace)``. ``config.steps == 0`` returns the
    initialization.
    """
    check_tag(generator_tag)
    if not tasks:
        raise InvalidArgument("pretraining needs at least one task")
    h, w = tasks[0].height, tasks[0].width
    K = config.K if config.K is not None else max(2, max(t.label for t in tasks) + 1)
    if not config.hidden:
        config = dataclasses.replace(config, hidden=DEFAULT_HIDDEN[generator_tag])
    ckpt = new_checkpoint(generator_tag, h, w, K, config.hidden, config.seed, config.T,
                          config.beta_start, config.beta_end)
    chash = config_hash({"kind": "sft", "tag": generator_tag, "n_tasks": len(tasks),
                         "K": K, **dataclasses.asdict(config)})
    schedule = ckpt.schedule
    static = static_conditions(tasks, K)
    x0_all = np.stack([to_model_space(t.source) for t in tasks])
    params = ckpt.params.copy()
    opt = adam_init(params, lr=config.lr)
    r = derived_rng(config.seed, 0x5F7)
    trace = LossTrace()
    for step in range(config.steps):
        idx = r.integers(0, len(tasks), size=config.batch_size)
        t = draw_times(generator_tag, r, config.batch_size, schedule.T)
        eps = r.standard_normal(x0_all[idx].shape)
        losses, grads = inner_losses(params, generator_tag, static[idx], x0_all[idx], t, eps,
                                     schedule, weights=np.full(len(idx), 1.0 / len(idx)))
        loss = float(np.mean(losses))
        _check_finite(loss, step, "pretraining")
        adam_update_(opt, params, grads)
        trace.append(step, loss)
        if on_step is not None:
            on_step(step, loss)
    return ckpt.with_params(quantize(params), step=config.steps, config_hash=chash), trace


def train_dpo(pretrained: Checkpoint, dataset: PreferenceDataset, config: DpoConfig = DpoConfig(),
              snapshot_steps: Sequence[int] = (),
              on_step: Callable[[int, float], None] | None = None):
    """Fine-tune a copy of ``pretrained`` on the dataset's pairs.

    The reference model is the (untouched) pretrained parameters. Returns
    ``(checkpoint, trace, snapshots)`` where ``snapshots`` maps each requested
    step count to the checkpoint after that many optimizer steps.
    """
    if dataset.generator_tag != pretrained.tag:
        raise TagMismatch(
            f"dataset was generated by {dataset.generator_tag!r} but checkpoint is "
            f"{pretrained.tag!r}")
    if not dataset.pairs:
        raise InvalidArgument("dataset has no preference pairs")
    chash = config_hash({"kind": "dpo", "tag": pretrained.tag, "reward": dataset.reward_name,
                         "n_pairs": len(dataset.pairs), "N": dataset.n_candidates,
                         **dataclasses.asdict(config)})
    reference = pretrained.params
    tasks = dataset.tasks_by_id()
    pair_tasks = [tasks[p.task_id] for p in dataset.pairs]
    static = static_conditions(pair_tasks, pretrained.K)
    x_w = np.stack([to_model_space(p.preferred) for p in dataset.pairs])
    x_l = np.stack([to_model_space(p.dispreferred) for p in dataset.pairs])
    schedule = pretrained.schedule
    params = reference.copy()
    opt = adam_init(params, lr=config.lr)
    r = derived_rng(config.seed, 0xD90)
    trace = LossTrace()
    snapshots = {}
    wanted = set(snapshot_steps)
    if 0 in wanted:
        snapshots[0] = pretrained
    order = np.empty(0, dtype=np.int64)
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order = np.concatenate([order, r.permutation(len(dataset.pairs))])
        idx, order = order[:config.batch_size], order[config.batch_size:]
        n = len(idx)
        t = draw_times(pretrained.tag, r, n, schedule.T)
        eps_w = r.standard_normal((n, x_w.shape[1]))
        eps_l = r.standard_normal((n, x_w.shape[1]))
        loss, grads, _ = dpo_batch_loss(params, reference, pretrained.tag, static[idx],
                                        x_w[idx], x_l[idx], t, eps_w, eps_l, config.beta,
                                        schedule)
        _check_finite(loss, step, "DPO training")
        adam_update_(opt, params, grads)
        trace.append(step, loss)
        if on_step is not None:
            on_step(step, loss)
        if step + 1 in wanted:
            snapshots[step + 1] = pretrained.with_params(
                quantize(params), step=pretrained.step + step + 1, config_hash=chash)
    final = (pretrained if config.steps == 0 else
             pretrained.with_params(quantize(params), step=pretrained.step + config.steps,
                                    config_hash=chash))
    return final, trace, snapshots


def hparam_grid(pretrained: Checkpoint, dataset: PreferenceDataset, betas: Sequence[float],
                lrs: Sequence[float], eval_spec, base: DpoConfig = DpoConfig()) -> list[dict]:
    """Train and evaluate one model per (beta, lr) cell.

    A cell that fails is recorded with its error category in ``status`` and the
    grid moves on.
    """
    # evalsuite builds on this module, so it is imported here rather than at the top.
    from .evalsuite import evaluate

    if not betas or not lrs:
        raise InvalidArgument("beta and lr grids must be non-empty")
    rows = []
    for beta in betas:
        for lr in lrs:
            row: dict = {"beta": float(beta), "lr": float(lr)}
            try:
                config = dataclasses.replace(base, beta=float(beta), lr=float(lr))
                ckpt, trace, _ = train_dpo(pretrained, dataset, config)
                row["final_loss"] = float(trace.losses[-1]) if trace.losses else math.nan
                row.update(evaluate(ckpt, eval_spec).metrics())
                row["status"] = "ok"
            except InpaintPrefError as e:
                log.error("grid cell beta=%g lr=%g failed: %s", beta, lr, e)
                row["status"] = e.category
            rows.append(row)
    return rows

"""Evaluation and experiment harness.

Anything with a ``generate(tasks, seeds) -> list[image]`` method can be
evaluated; checkpoints are wrapped automatically. Sample ``m`` of task ``t``
uses seed ``stable_hash(seed, t, m)``, so two models evaluated with the same
seed face identical noise.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import prefdata
from .dpo import DpoConfig, train_dpo
from .errors import InpaintPrefError, InvalidArgument
from .models import Checkpoint, sample_images
from .rewards import brightness, complexity, fidelity_batch, get_profile, vividness
from .seeding import stable_hash
from .toyworld import InpaintTask, blend, sample_like_training

log = logging.getLogger(__name__)

BIAS_STATS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "brightness": brightness,
    "vividness": vividness,
    "complexity": complexity,
}

Judge = Callable[[InpaintTask, np.ndarray], float]


class ImageGenerator(Protocol):
    tag: str

    def generate(self, tasks: Sequence[InpaintTask], seeds: Sequence[int]) -> list[np.ndarray]:
        ...


@dataclass
class CheckpointGenerator:
    checkpoint: Checkpoint
    fm_steps: int = 25
    tag: str = ""

    def __post_init__(self):
        self.tag = self.tag or self.checkpoint.tag

    def generate(self, tasks, seeds):
        return sample_images(self.checkpoint, list(tasks), list(seeds), self.fm_steps)


@dataclass
class SourceGenerator:
    """Returns each task's source image unchanged."""
    tag: str = "source"

    def generate(self, tasks, seeds):
        return [t.source.copy() for t in tasks]


@dataclass
class ConstantGenerator:
    value: float
    blend_with_source: bool = False
    tag: str = "constant"

    def generate(self, tasks, seeds):
        out = []
        for t in tasks:
            img = np.full_like(t.source, self.value)
            out.append(blend(img, t.source, t.mask) if self.blend_with_source else img)
        return out


@dataclass
class DataResampler:
    """Fresh draws from the training distribution, blended into the task."""
    noise_sigma: float
    tag: str = "data"

    def generate(self, tasks, seeds):
        return [blend(sample_like_training(t, self.noise_sigma, s), t.source, t.mask)
                for t, s in zip(tasks, seeds)]


def as_generator(model, fm_steps: int = 25) -> ImageGenerator:
    if isinstance(model, Checkpoint):
        return CheckpointGenerator(model, fm_steps)
    if hasattr(model, "generate"):
        return model
    raise InvalidArgument(f"cannot evaluate {type(model).__name__}")


@dataclass
class EvalSpec:
    tasks: list[InpaintTask]
    rewards: tuple[str, ...] = ("fidelity", "hps_like", "pick_like")
    samples_per_task: int = 4
    seed: int = 0
    fm_steps: int = 25
    judge: Judge | None = None

    def __post_init__(self):
        if self.samples_per_task < 1:
            raise InvalidArgument("samples_per_task must be >= 1")
        if not self.tasks:
            raise InvalidArgument("evaluation needs at least one task")


def eval_seeds(tasks: Sequence[InpaintTask], M: int, seed: int):
    flat = [t for t in tasks for _ in range(M)]
    seeds = [stable_hash(seed, t.task_id, m) for t in tasks for m in range(M)]
    return flat, seeds


@dataclass
class EvalReport:
    model_tag: str
    reward_means: dict[str, float]
    bias: dict[str, float]
    fidelity: float
    judge_score: float | None
    sample_count: int
    per_sample: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def rows(self) -> list[tuple[str, str, float]]:
        rows = [("reward", k, v) for k, v in self.reward_means.items()]
        rows += [("bias", k, v) for k, v in self.bias.items()]
        rows.append(("fidelity", "fidelity", self.fidelity))
        if self.judge_score is not None:
            rows.append(("judge", "judge", self.judge_score))
        rows.append(("count", "samples", float(self.sample_count)))
        return rows

    def metrics(self) -> dict[str, float]:
        out = {"fidelity": self.fidelity, **self.bias}
        out.update({f"reward_{k}": v for k, v in self.reward_means.items()})
        if self.judge_score is not None:
            out["judge"] = self.judge_score
        return out


def evaluate(model, spec: EvalSpec) -> EvalReport:
    """Mean reward, bias statistics and fidelity over ``M`` samples per task."""
    gen = as_generator(model, spec.fm_steps)
    flat, seeds = eval_seeds(spec.tasks, spec.samples_per_task, spec.seed)
    images = np.stack(gen.generate(flat, seeds))
    per_sample = {name: np.asarray(fn(images)) for name, fn in BIAS_STATS.items()}
    per_sample["fidelity"] = fidelity_batch(flat, images)
    reward_means = {}
    for name in spec.rewards:
        values = get_profile(name).score_batch(flat, images)
        per_sample[f"reward_{name}"] = values
        reward_means[name] = float(np.mean(values))
    judge_score = None
    if spec.judge is not None:
        scores = np.array([spec.judge(t, img) for t, img in zip(flat, images)], dtype=float)
        per_sample["judge"] = scores
        judge_score = float(np.mean(scores))
    report = EvalReport(gen.tag, reward_means,
                        {k: float(np.mean(per_sample[k])) for k in BIAS_STATS},
                        float(np.mean(per_sample["fidelity"])), judge_score, len(images),
                        per_sample)
    if not all(math.isfinite(v) for _, _, v in report.rows()):
        raise InpaintPrefError("evaluation produced non-finite metrics", "non-finite")
    return report


# --- win rates ----------------------------------------------------------------

@dataclass
class WinRate:
    win_a: float
    win_b: float
    tie: float
    counted: int
    skipped: int

    def row(self) -> tuple[float, float, float]:
        return (self.win_a, self.win_b, self.tie)


def win_rate(model_a, model_b, tasks: Sequence[InpaintTask], judge: Judge, seed: int = 0,
             fm_steps: int = 25) -> WinRate:
    """One sample per task from each model under the same seed; A wins a task
    when the judge scores it strictly higher."""
    ga, gb = as_generator(model_a, fm_steps), as_generator(model_b, fm_steps)
    tasks = list(tasks)
    seeds = [stable_hash(seed, t.task_id, 0) for t in tasks]
    imgs_a, imgs_b = ga.generate(tasks, seeds), gb.generate(tasks, seeds)
    wins_a = wins_b = ties = skipped = 0
    for t, a, b in zip(tasks, imgs_a, imgs_b):
        try:
            sa, sb = judge(t, a), judge(t, b)
        except Exception as e:  # judge failures skip the task
            log.warning("judge failed on task %d: %s", t.task_id, e)
            skipped += 1
            continue
        if sa > sb:
            wins_a += 1
        elif sb > sa:
            wins_b += 1
        else:
            ties += 1
    counted = wins_a + wins_b + ties
    if counted == 0:
        raise InpaintPrefError("judge failed on every task", "judge")
    return WinRate(wins_a / counted, wins_b / counted, ties / counted, counted, skipped)


# --- reward-hacking drift -------------------------------------------------------

@dataclass
class DriftReport:
    drift: dict[str, float]
    stderr: dict[str, float]
    hacking_index: float
    generated: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    task_ids: list[int] = field(repr=False, default_factory=list)

    def rows(self):
        rows = [("drift", k, v) for k, v in self.drift.items()]
        rows += [("stderr", k, v) for k, v in self.stderr.items()]
        rows.append(("hacking_index", "max_abs_drift", self.hacking_index))
        return rows


def training_stats(train_tasks: Sequence[InpaintTask]) -> dict[str, np.ndarray]:
    images = np.stack([t.source for t in train_tasks])
    return {name: np.asarray(fn(images)) for name, fn in BIAS_STATS.items()}


def drift(model, tasks: Sequence[InpaintTask], train_tasks: Sequence[InpaintTask],
          M: int = 4, seed: int = 0, fm_steps: int = 25) -> DriftReport:
    """Mean bias statistics of generated images minus those of the training
    sources; the hacking index is the largest absolute drift."""
    if M < 1:
        raise InvalidArgument("M must be >= 1")
    gen = as_generator(model, fm_steps)
    flat, seeds = eval_seeds(tasks, M, seed)
    images = np.stack(gen.generate(flat, seeds))
    generated = {name: np.asarray(fn(images)) for name, fn in BIAS_STATS.items()}
    train = training_stats(train_tasks)
    d, se = {}, {}
    for name in BIAS_STATS:
        g, tr = generated[name], train[name]
        d[name] = float(np.mean(g) - np.mean(tr))
        se[name] = float(math.sqrt(np.var(g, ddof=1) / len(g) + np.var(tr, ddof=1) / len(tr)))
    return DriftReport(d, se, max(abs(v) for v in d.values()), generated,
                       [t.task_id for t in flat])


def paired_drift_difference(a: DriftReport, b: DriftReport, stat: str) -> tuple[float, float]:
    """Mean and standard error of ``a - b`` for a bias statistic, paired by
    sample (both reports must come from the same tasks and seed)."""
    if a.task_ids != b.task_ids:
        raise InvalidArgument("drift reports were not computed on the same samples")
    diff = a.generated[stat] - b.generated[stat]
    return float(np.mean(diff)), float(np.std(diff, ddof=1) / math.sqrt(len(diff)))


# --- scaling harnesses ---------------------------------------------------------------

def scale_candidates(pretrained: Checkpoint, train_tasks: Sequence[InpaintTask], selector: str,
                     N_list: Sequence[int], config: DpoConfig, eval_spec: EvalSpec,
                     global_seed: int = 0, fm_steps: int = 25,
                     pool: Sequence[prefdata.Candidate] | None = None) -> list[dict]:
    """Build a dataset per candidate count N, train one model per dataset with
    the same config and evaluate it. Candidates for smaller N are the prefix
    of the largest pool."""
    if list(N_list) != sorted(N_list) or not N_list:
        raise InvalidArgument("N_list must be non-empty and ascending")
    if pool is None:
        pool = prefdata.gen_candidates(pretrained, train_tasks, max(N_list), global_seed,
                                       fm_steps=fm_steps)
    needed = set(eval_spec.rewards) | ({selector} - {prefdata.RANDOM, prefdata.ENSEMBLE})
    if selector == prefdata.ENSEMBLE:
        needed |= set(prefdata.DEFAULT_ENSEMBLE)
    missing = [n for n in needed if any(n not in c.scores for c in pool)]
    if missing:
        prefdata.score_candidates(pool, train_tasks, missing)
    rows = []
    for N in N_list:
        row: dict = {"N": N}
        try:
            ds = prefdata.build_pairs(prefdata.first_n(pool, N), train_tasks, selector,
                                      seed=global_seed, generator_tag=pretrained.tag,
                                      K=pretrained.K)
            row["pairs"] = len(ds.pairs)
            row["margin"] = ds.mean_margin()
            ckpt, _, _ = train_dpo(pretrained, ds, config)
            row.update(evaluate(ckpt, eval_spec).metrics())
            row["status"] = "ok"
        except InpaintPrefError as e:
            log.error("scale_candidates N=%d failed: %s", N, e)
            row["status"] = e.category
        rows.append(row)
    return rows


def scale_samples(pretrained: Checkpoint, dataset: prefdata.PreferenceDataset,
                  step_list: Sequence[int], config: DpoConfig, eval_spec: EvalSpec) -> list[dict]:
    """Evaluate snapshots of one DPO run after each step count in ``step_list``."""
    if list(step_list) != sorted(step_list) or not step_list or step_list[0] < 0:
        raise InvalidArgument("step_list must be non-empty, non-negative and ascending")
    run = DpoConfig(config.beta, config.lr, max(step_list), config.batch_size, config.seed)
    _, _, snaps = train_dpo(pretrained, dataset, run, snapshot_steps=step_list)
    rows = []
    for s in step_list:
        row: dict = {"steps": s}
        try:
            row.update(evaluate(snaps[s], eval_spec).metrics())
            row["status"] = "ok"
        except InpaintPrefError as e:
            row["status"] = e.category
        rows.append(row)
    return rows


# --- CSV tables -------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    """CSV with a one-line header; floats are written with full precision."""
    if columns is None:
        columns = []
        for r in rows:
            columns += [k for k in r if k not in columns]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _parse(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_table(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(f)]


def write_report(path, report: EvalReport) -> None:
    write_table(path, [dict(metric=m, name=n, value=v) for m, n, v in report.rows()],
                ["metric", "name", "value"])


def write_win_rate(path, wr: WinRate) -> None:
    write_table(path, [dict(winA=wr.win_a, winB=wr.win_b, tie=wr.tie)], ["winA", "winB", "tie"])


def write_drift(path, rep: DriftReport) -> None:
    write_table(path, [dict(metric=m, name=n, value=v) for m, n, v in rep.rows()],
                ["metric", "name", "value"])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p

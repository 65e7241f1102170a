"""Preference-data factory: candidates, scoring, pair selection and the
"PFD1" container.

Candidate ``i`` of task ``t`` is sampled with seed
``stable_hash(global_seed, t, i)``, so the first N candidates of a larger
pool are exactly the candidates a smaller run would have produced.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .binio import Reader, Writer
from .errors import FormatError, InvalidArgument, MissingScores, ShapeError
from .models import GENERATOR_TAGS, Checkpoint, check_tag, sample_images
from .rewards import DEFAULT_ENSEMBLE, ScoreMatrix, ensemble_rank, get_profile
from .seeding import rng as derived_rng
from .seeding import stable_hash
from .toyworld import InpaintTask

log = logging.getLogger(__name__)

RANDOM = "random"
ENSEMBLE = "ensemble"

DATASET_MAGIC = b"PFD1"
DATASET_VERSION = 1
_NO_TAG = 255


@dataclass
class Candidate:
    task_id: int
    candidate_idx: int
    seed: int
    image: np.ndarray
    scores: dict[str, float] = field(default_factory=dict)


@dataclass
class PreferencePair:
    task_id: int
    reward_name: str
    preferred: np.ndarray
    dispreferred: np.ndarray
    preferred_seed: int
    dispreferred_seed: int
    preferred_idx: int
    dispreferred_idx: int
    margin: float

    def __post_init__(self):
        if self.preferred_idx == self.dispreferred_idx:
            raise InvalidArgument(f"task {self.task_id}: preferred and dispreferred coincide")
        if not self.margin >= 0:
            raise InvalidArgument(f"task {self.task_id}: negative margin {self.margin}")


@dataclass
class PreferenceDataset:
    height: int
    width: int
    K: int
    reward_name: str
    n_candidates: int
    generator_tag: str | None
    tasks: list[InpaintTask]
    pairs: list[PreferencePair] = field(default_factory=list)
    excluded: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.generator_tag is not None:
            check_tag(self.generator_tag)
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("task ids must be unique within a dataset")
        if len(self.pairs) > len(self.tasks):
            raise InvalidArgument("more pairs than tasks")
        for t in self.tasks:
            if t.source.shape != (self.height, self.width, 3) or not 0 <= t.label < self.K:
                raise ShapeError(f"task {t.task_id} does not match the dataset header")
        known = set(ids)
        for p in self.pairs:
            if p.task_id not in known:
                raise InvalidArgument(f"pair references unknown task {p.task_id}")

    def tasks_by_id(self) -> dict[int, InpaintTask]:
        return {t.task_id: t for t in self.tasks}

    def mean_margin(self) -> float:
        return float(np.mean([p.margin for p in self.pairs])) if self.pairs else 0.0

    def pixel_checksum(self) -> str:
        """SHA-256 over all pixel data as little-endian f32."""
        h = hashlib.sha256()
        for t in self.tasks:
            h.update(t.source.astype("<f4").tobytes())
            h.update(t.mask.astype("<f4").tobytes())
        for p in self.pairs:
            h.update(p.preferred.astype("<f4").tobytes())
            h.update(p.dispreferred.astype("<f4").tobytes())
        return h.hexdigest()


def task_dataset(tasks: Sequence[InpaintTask], K: int) -> PreferenceDataset:
    """A pair-less dataset holding only tasks (the output of make-data)."""
    if not tasks:
        raise InvalidArgument("no tasks")
    return PreferenceDataset(tasks[0].height, tasks[0].width, K, "", 0, None, list(tasks))


# --- candidates -----------------------------------------------------------------

def candidate_seed(global_seed: int, task_id: int, candidate_idx: int) -> int:
    return stable_hash(global_seed, task_id, candidate_idx)


def gen_candidates(model: Checkpoint, tasks: Sequence[InpaintTask], N: int, global_seed: int,
                   generator_tag: str | None = None, fm_steps: int = 25,
                   batch_size: int = 1024) -> list[Candidate]:
    """N blended samples per task, ordered task-major."""
    if N < 2:
        raise InvalidArgument(f"need at least 2 candidates per task, got {N}")
    if generator_tag is not None and generator_tag != model.tag:
        raise InvalidArgument(f"generator tag {generator_tag!r} does not match checkpoint "
                              f"{model.tag!r}")
    flat_tasks = [t for t in tasks for _ in range(N)]
    idxs = [i for _ in tasks for i in range(N)]
    seeds = [candidate_seed(global_seed, t.task_id, i) for t, i in zip(flat_tasks, idxs)]
    images = sample_images(model, flat_tasks, seeds, fm_steps, batch_size, candidate_ids=idxs)
    return [Candidate(t.task_id, i, s, img)
            for t, i, s, img in zip(flat_tasks, idxs, seeds, images)]


def score_candidates(candidates: Sequence[Candidate], tasks: Sequence[InpaintTask],
                     reward_names: Iterable[str]) -> None:
    """Fill ``candidate.scores`` for every named reward (in place)."""
    by_id = {t.task_id: t for t in tasks}
    cand_tasks = [by_id[c.task_id] for c in candidates]
    images = np.stack([c.image for c in candidates])
    for name in reward_names:
        values = get_profile(name).score_batch(cand_tasks, images)
        for c, v in zip(candidates, values):
            c.scores[name] = float(v)


def group_by_task(candidates: Sequence[Candidate]) -> dict[int, list[Candidate]]:
    groups: dict[int, list[Candidate]] = {}
    for c in candidates:
        groups.setdefault(c.task_id, []).append(c)
    for g in groups.values():
        g.sort(key=lambda c: c.candidate_idx)
    return groups


def first_n(candidates: Sequence[Candidate], N: int) -> list[Candidate]:
    """Restrict a candidate pool to indices below N."""
    return [c for c in candidates if c.candidate_idx < N]


# --- pair construction -----------------------------------------------------------

def build_pairs(candidates: Sequence[Candidate], tasks: Sequence[InpaintTask], selector: str,
                seed: int = 0, generator_tag: str | None = None,
                ensemble_members: Sequence[str] = DEFAULT_ENSEMBLE,
                margin_reward: str | None = None, K: int | None = None) -> PreferenceDataset:
    """One (preferred, dispreferred) pair per task.

    ``selector`` is a reward name (best vs worst score), ``"ensemble"`` (best
    vs worst mean fractional rank over ``ensemble_members``) or ``"random"``
    (two distinct uniformly drawn candidates; the margin is the absolute score
    gap under ``margin_reward`` if given, else 0). Tasks whose candidates carry
    no ranking signal are excluded and logged.
    """
    groups = group_by_task(candidates)
    by_id = {t.task_id: t for t in tasks}
    members = list(ensemble_members) if selector == ENSEMBLE else [selector]
    pairs, excluded, used_tasks = [], [], []
    n_cands = set()
    for task_id in sorted(groups):
        group = groups[task_id]
        if task_id not in by_id:
            raise InvalidArgument(f"candidates reference unknown task {task_id}")
        if len(group) < 2:
            raise InvalidArgument(f"task {task_id} has fewer than 2 candidates")
        n_cands.add(len(group))
        used_tasks.append(by_id[task_id])
        if selector == RANDOM:
            r = derived_rng(seed, task_id, 0xAA)
            i, j = (int(v) for v in r.choice(len(group), size=2, replace=False))
            margin = 0.0
            if margin_reward is not None:
                margin = abs(_scores(group, margin_reward)[i] - _scores(group, margin_reward)[j])
        else:
            matrix = ScoreMatrix(task_id, members, np.array([_scores(group, m) for m in members]))
            sel = ensemble_rank(matrix)
            if sel.no_signal:
                log.info("task %d excluded: candidates tied under %s", task_id, selector)
                excluded.append(task_id)
                continue
            i, j = sel.preferred, sel.dispreferred
            if selector == ENSEMBLE:
                margin = float(sel.mean_ranks[j] - sel.mean_ranks[i])
            else:
                margin = float(matrix.scores[0, i] - matrix.scores[0, j])
        pairs.append(PreferencePair(
            task_id, selector, group[i].image, group[j].image, group[i].seed, group[j].seed,
            group[i].candidate_idx, group[j].candidate_idx, margin))
    if not used_tasks:
        raise InvalidArgument("no candidates")
    t0 = used_tasks[0]
    if K is None:
        K = max(2, max(t.label for t in used_tasks) + 1)
    return PreferenceDataset(t0.height, t0.width, K, selector, max(n_cands), generator_tag,
                             used_tasks, pairs, excluded)


def _scores(group: Sequence[Candidate], name: str) -> list[float]:
    try:
        return [c.scores[name] for c in group]
    except KeyError:
        raise MissingScores(
            f"candidates of task {group[0].task_id} have no {name!r} scores") from None


# --- PFD1 container ---------------------------------------------------------------
#
#   "PFD1" u16 version | u16 height | u16 width | u16 K | u16 N | u8 generator tag
#   (0 DDPM, 1 FM, 255 none) | u16 len + utf-8 reward name
#   | u32 n_tasks | per task: u32 task_id, u16 label, f32[H*W*3] source, u8[H*W] mask
#   | u32 n_pairs | per pair: u32 task_id, u16 preferred_idx, u16 dispreferred_idx,
#       u64 preferred_seed, u64 dispreferred_seed, f64 margin,
#       f32[H*W*3] preferred, f32[H*W*3] dispreferred
#   | u32 n_excluded | u32 task ids
#   | u32 crc32 of everything above

def dataset_bytes(ds: PreferenceDataset) -> bytes:
    w = Writer()
    w.raw(DATASET_MAGIC)
    w.pack("H", DATASET_VERSION)
    tag = _NO_TAG if ds.generator_tag is None else GENERATOR_TAGS.index(ds.generator_tag)
    w.pack("HHHHB", ds.height, ds.width, ds.K, ds.n_candidates, tag)
    w.string(ds.reward_name)
    w.pack("I", len(ds.tasks))
    for t in ds.tasks:
        w.pack("IH", t.task_id, t.label)
        w.f32(t.source)
        w.u8(t.mask)
    w.pack("I", len(ds.pairs))
    for p in ds.pairs:
        w.pack("IHHQQd", p.task_id, p.preferred_idx, p.dispreferred_idx, p.preferred_seed,
               p.dispreferred_seed, p.margin)
        w.f32(p.preferred)
        w.f32(p.dispreferred)
    w.pack("I", len(ds.excluded))
    if ds.excluded:
        w.pack(f"{len(ds.excluded)}I", *ds.excluded)
    return w.finish()


def dataset_from_bytes(data: bytes, what: str = "dataset") -> PreferenceDataset:
    r = Reader(data, DATASET_MAGIC, DATASET_VERSION, what)
    height, width, K, N, tag = r.unpack("HHHHB")
    if tag != _NO_TAG and tag >= len(GENERATOR_TAGS):
        raise FormatError(f"{what}: unknown generator tag code {tag}", "malformed")
    reward_name = r.string()
    npix = height * width
    (n_tasks,) = r.unpack("I")
    tasks = []
    for _ in range(n_tasks):
        tid, label = r.unpack("IH")
        src = r.f32(3 * npix).reshape(height, width, 3)
        mask = r.u8(npix).reshape(height, width).astype(np.float64)
        tasks.append(InpaintTask(tid, src, mask, label))
    (n_pairs,) = r.unpack("I")
    pairs = []
    for _ in range(n_pairs):
        tid, pi, di, ps, ds_, margin = r.unpack("IHHQQd")
        pref = r.f32(3 * npix).reshape(height, width, 3)
        disp = r.f32(3 * npix).reshape(height, width, 3)
        try:
            pairs.append(PreferencePair(tid, reward_name, pref, disp, ps, ds_, pi, di, margin))
        except InvalidArgument as e:
            raise FormatError(f"{what}: {e}", "malformed") from None
    (n_excl,) = r.unpack("I")
    excluded = list(r.unpack(f"{n_excl}I")) if n_excl else []
    r.finish()
    try:
        return PreferenceDataset(height, width, K, reward_name, N,
                                 None if tag == _NO_TAG else GENERATOR_TAGS[tag],
                                 tasks, pairs, excluded)
    except (InvalidArgument, ShapeError) as e:
        raise FormatError(f"{what}: {e}", "malformed") from None


def save_dataset(ds: PreferenceDataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> PreferenceDataset:
    return dataset_from_bytes(Path(path).read_bytes(), str(path))

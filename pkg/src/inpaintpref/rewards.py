"""Reward scorers and rank-based ensembling.

Image statistics accept a single image (H, W, 3) or a stack (n, H, W, 3)
and return a scalar or an (n,) array accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgument, ShapeError
from .seeding import unit_float
from .toyworld import InpaintTask, prototype

LUMA = np.array([0.299, 0.587, 0.114])


def _as_float(x):
    return float(x) if np.ndim(x) == 0 else x


def brightness(img: np.ndarray):
    """Mean luminance."""
    return _as_float(np.mean(np.asarray(img) @ LUMA, axis=(-2, -1)))


def vividness(img: np.ndarray):
    """Mean per-pixel channel spread (max - min)."""
    img = np.asarray(img)
    return _as_float(np.mean(img.max(axis=-1) - img.min(axis=-1), axis=(-2, -1)))


def complexity(img: np.ndarray):
    """Mean absolute difference over horizontally and vertically adjacent
    pixel pairs, all channels."""
    img = np.asarray(img)
    dx = np.abs(np.diff(img, axis=-2))  # along width
    dy = np.abs(np.diff(img, axis=-3))  # along height
    h, w = img.shape[-3], img.shape[-2]
    total = dx.sum(axis=(-3, -2, -1)) + dy.sum(axis=(-3, -2, -1))
    return _as_float(total / (3 * (h * (w - 1) + (h - 1) * w)))


def fidelity(task: InpaintTask, img: np.ndarray) -> float:
    """Negative MSE against the class prototype; 0 is a perfect match."""
    img = np.asarray(img)
    proto = prototype(task.label, task.height, task.width)
    if img.shape != proto.shape:
        raise ShapeError(f"image {img.shape} vs prototype {proto.shape}")
    return -float(np.mean((img - proto) ** 2))


def fidelity_batch(tasks: Sequence[InpaintTask], images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    cache: dict[tuple, np.ndarray] = {}
    protos = []
    for t in tasks:
        key = (t.label, t.height, t.width)
        if key not in cache:
            cache[key] = prototype(*key)
        protos.append(cache[key])
    return -np.mean((images - np.stack(protos)) ** 2, axis=(1, 2, 3))


@dataclass(frozen=True)
class BiasProfile:
    name: str
    w_brightness: float = 0.0
    w_vividness: float = 0.0
    w_complexity: float = 0.0
    include_fidelity: bool = True

    def __post_init__(self):
        if not all(np.isfinite([self.w_brightness, self.w_vividness, self.w_complexity])):
            raise InvalidArgument(f"profile {self.name}: weights must be finite")

    def negated(self, name: str) -> "BiasProfile":
        return BiasProfile(name, -self.w_brightness, -self.w_vividness, -self.w_complexity,
                           self.include_fidelity)

    def score_batch(self, tasks: Sequence[InpaintTask], images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        out = np.zeros(len(images))
        if self.include_fidelity:
            out += fidelity_batch(tasks, images)
        if self.w_brightness:
            out += self.w_brightness * brightness(images)
        if self.w_vividness:
            out += self.w_vividness * vividness(images)
        if self.w_complexity:
            out += self.w_complexity * complexity(images)
        return out


def reward_score(profile: BiasProfile, task: InpaintTask, img: np.ndarray) -> float:
    return float(profile.score_batch([task], np.asarray(img)[None])[0])


HPS_LIKE = BiasProfile("hps_like", 0.3, 0.3, 0.6, True)
PICK_LIKE = HPS_LIKE.negated("pick_like")
FIDELITY = BiasProfile("fidelity", include_fidelity=True)
NEG_BRIGHTNESS = BiasProfile("neg_brightness", w_brightness=-1.0, include_fidelity=False)

REGISTRY: dict[str, BiasProfile] = {
    p.name: p for p in [
        HPS_LIKE, PICK_LIKE, FIDELITY, NEG_BRIGHTNESS,
        BiasProfile("brightness", w_brightness=1.0, include_fidelity=False),
        BiasProfile("vividness", w_vividness=1.0, include_fidelity=False),
        BiasProfile("complexity", w_complexity=1.0, include_fidelity=False),
    ]
}

DEFAULT_ENSEMBLE = ("hps_like", "pick_like", "fidelity", "neg_brightness")


def get_profile(name: str) -> BiasProfile:
    try:
        return REGISTRY[name]
    except KeyError:
        raise InvalidArgument(
            f"unknown reward {name!r}; known: {', '.join(sorted(REGISTRY))}") from None


def register(profile: BiasProfile) -> None:
    REGISTRY[profile.name] = profile


Scorer = Callable[[InpaintTask, np.ndarray], float]


def scorer(name: str) -> Scorer:
    """A ``(task, image) -> float`` callable for a registered reward."""
    profile = get_profile(name)
    return lambda task, img: reward_score(profile, task, img)


def random_reward(task_id: int, candidate_idx: int, seed: int) -> float:
    """Uniform [0, 1) value determined by the triple."""
    return unit_float(seed, task_id, candidate_idx)


# --- ranking ----------------------------------------------------------------

def fractional_rank(scores: Sequence[float]) -> np.ndarray:
    """Rank 1 is the highest score; tied scores share the mean of their ranks."""
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidArgument("need a non-empty 1-D score list")
    if np.any(np.isnan(x)):
        raise InvalidArgument("cannot rank NaN scores")
    order = np.argsort(-x, kind="stable")
    sorted_x = x[order]
    ranks = np.empty(len(x))
    start = 0
    while start < len(x):
        end = start
        while end + 1 < len(x) and sorted_x[end + 1] == sorted_x[start]:
            end += 1
        ranks[order[start:end + 1]] = (start + end) / 2.0 + 1.0
        start = end + 1
    return ranks


@dataclass
class ScoreMatrix:
    task_id: int
    reward_names: list[str]
    scores: np.ndarray  # (R, N)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.reward_names):
            raise ShapeError(
                f"score matrix {self.scores.shape} does not match {len(self.reward_names)} rewards")
        if not np.all(np.isfinite(self.scores)):
            raise InvalidArgument(f"task {self.task_id}: non-finite scores")

    @property
    def n_candidates(self) -> int:
        return self.scores.shape[1]


class RankSelection(NamedTuple):
    preferred: int
    dispreferred: int
    mean_ranks: np.ndarray
    no_signal: bool


def ensemble_rank(matrix: ScoreMatrix) -> RankSelection:
    """Average fractional rank across rewards; preferred = lowest mean rank,
    dispreferred = highest, ties to the lowest candidate index. Flags
    ``no_signal`` when every candidate has the same mean rank."""
    if matrix.n_candidates < 2 or len(matrix.reward_names) < 1:
        raise InvalidArgument("ensemble ranking needs >= 2 candidates and >= 1 reward")
    mean_ranks = np.mean([fractional_rank(row) for row in matrix.scores], axis=0)
    preferred = int(np.argmin(mean_ranks))
    dispreferred = int(np.argmax(mean_ranks))
    no_signal = bool(mean_ranks[dispreferred] == mean_ranks[preferred])
    return RankSelection(preferred, dispreferred, mean_ranks, no_signal)

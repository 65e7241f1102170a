"""Procedural inpainting world.

Images are float64 arrays of shape (H, W, 3) in [0, 1]; masks are (H, W)
arrays of 0.0/1.0 where 1 marks the region to inpaint. Every image this
module emits holds float32-representable values, so the binary containers
(which store pixels as f32) round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, ShapeError
from .seeding import rng as derived_rng

DEFAULT_SIZE = 16
NEUTRAL_GRAY = 0.5

# (background, foreground, rectangle half-extents as fractions of (H, W)).
# Channels stay inside [0.15, 0.85] so clamping after noise is negligible.
_PALETTE = [
    ((0.18, 0.18, 0.22), (0.38, 0.32, 0.30), (0.30, 0.30)),  # dark, muted
    ((0.82, 0.82, 0.78), (0.64, 0.70, 0.70), (0.20, 0.35)),  # bright, muted
    ((0.15, 0.16, 0.45), (0.75, 0.20, 0.18), (0.35, 0.20)),  # dark, vivid
    ((0.85, 0.72, 0.20), (0.22, 0.70, 0.35), (0.25, 0.25)),  # bright, vivid
]


@dataclass(frozen=True)
class ClassPrototype:
    background: tuple[float, float, float]
    foreground: tuple[float, float, float]
    half_extent: tuple[float, float]  # fraction of height, width

    def render(self, height: int, width: int) -> np.ndarray:
        img = np.empty((height, width, 3))
        img[:] = self.background
        hh = max(1, int(round(self.half_extent[0] * height)))
        hw = max(1, int(round(self.half_extent[1] * width)))
        cy, cx = height // 2, width // 2
        img[max(0, cy - hh):cy + hh, max(0, cx - hw):cx + hw] = self.foreground
        return to_f32_grid(img)


def prototype_spec(label: int) -> ClassPrototype:
    if label < 0:
        raise InvalidArgument(f"label must be non-negative, got {label}")
    if label < len(_PALETTE):
        bg, fg, ext = _PALETTE[label]
        return ClassPrototype(bg, fg, ext)
    # Extra classes: rotate hues deterministically.
    phase = 2 * np.pi * (label * 0.381966)
    bg = tuple(float(0.5 + 0.3 * np.cos(phase + k * 2.0944)) for k in range(3))
    fg = tuple(float(0.5 - 0.3 * np.cos(phase + 1.0 + k * 2.0944)) for k in range(3))
    ext = (0.15 + 0.2 * ((label * 7) % 5) / 4, 0.15 + 0.2 * ((label * 3) % 5) / 4)
    return ClassPrototype(bg, fg, ext)  # type: ignore[arg-type]


def prototype(label: int, height: int = DEFAULT_SIZE, width: int = DEFAULT_SIZE) -> np.ndarray:
    return prototype_spec(label).render(height, width)


def to_f32_grid(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


@dataclass
class InpaintTask:
    task_id: int
    source: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W), 1 = inpaint
    label: int

    @property
    def height(self) -> int:
        return self.source.shape[0]

    @property
    def width(self) -> int:
        return self.source.shape[1]


def random_rect_mask(rng: np.random.Generator, height: int, width: int,
                     min_frac: float = 0.25, max_frac: float = 0.75) -> np.ndarray:
    """Axis-aligned rectangle covering a fraction of the area in [min_frac, max_frac]."""
    area = height * width
    choices = [(h, w) for h in range(1, height + 1) for w in range(1, width + 1)
               if min_frac <= h * w / area <= max_frac and h * w < area]
    if not choices:
        raise InvalidArgument(f"no rectangle of {height}x{width} covers {min_frac}-{max_frac}")
    h, w = choices[rng.integers(len(choices))]
    top = rng.integers(0, height - h + 1)
    left = rng.integers(0, width - w + 1)
    mask = np.zeros((height, width))
    mask[top:top + h, left:left + w] = 1.0
    return mask


def make_dataset(seed: int, K: int = 4, n_tasks: int = 100, noise_sigma: float = 0.05,
                 height: int = DEFAULT_SIZE, width: int = DEFAULT_SIZE,
                 first_task_id: int = 0) -> list[InpaintTask]:
    """Tasks with labels cycling 0..K-1; each source is its prototype plus
    clamped Gaussian pixel noise. Each task draws from its own derived stream,
    so a task does not depend on how many others are generated."""
    if K < 2:
        raise InvalidArgument(f"K must be >= 2, got {K}")
    if n_tasks < 1:
        raise InvalidArgument(f"n_tasks must be >= 1, got {n_tasks}")
    if not 0.0 <= noise_sigma <= 0.2:
        raise InvalidArgument(f"noise_sigma must be in [0, 0.2], got {noise_sigma}")
    if height < 2 or width < 2:
        raise InvalidArgument(f"image must be at least 2x2, got {height}x{width}")
    if first_task_id < 0:
        raise InvalidArgument("first_task_id must be non-negative")
    protos = [prototype(k, height, width) for k in range(K)]
    tasks = []
    for i in range(n_tasks):
        tid = first_task_id + i
        label = i % K
        r = derived_rng(seed, tid, 0x7A5C)
        mask = random_rect_mask(r, height, width)
        src = protos[label]
        if noise_sigma > 0:
            src = np.clip(src + r.normal(0.0, noise_sigma, size=src.shape), 0.0, 1.0)
        tasks.append(InpaintTask(tid, to_f32_grid(src), mask, label))
    return tasks


def sample_like_training(task: InpaintTask, noise_sigma: float, seed: int) -> np.ndarray:
    """A fresh draw from the task's class distribution (prototype + noise)."""
    r = derived_rng(seed, task.task_id, 0xDA7A)
    img = prototype(task.label, task.height, task.width)
    img = np.clip(img + r.normal(0.0, noise_sigma, size=img.shape), 0.0, 1.0)
    return to_f32_grid(img)


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must have shape (H, W, 3), got {img.shape}")
    return img


def to_model_space(img: np.ndarray) -> np.ndarray:
    """Pixel image -> flat vector in [-1, 1]."""
    return (check_image(img) * 2.0 - 1.0).ravel()


def from_model_space(t: np.ndarray, height: int = DEFAULT_SIZE,
                     width: int = DEFAULT_SIZE) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.size != 3 * height * width:
        raise ShapeError(f"tensor of length {t.size} cannot form a {height}x{width}x3 image")
    return to_f32_grid(np.clip((t.reshape(height, width, 3) + 1.0) / 2.0, 0.0, 1.0))


def blend(generated: np.ndarray, source: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked pixels from ``generated``, everything else from ``source``."""
    generated, source = check_image(generated), check_image(source)
    mask = np.asarray(mask)
    if generated.shape != source.shape or mask.shape != source.shape[:2]:
        raise ShapeError(
            f"blend size mismatch: generated {generated.shape}, source {source.shape}, "
            f"mask {mask.shape}")
    return np.where(mask[..., None] > 0.5, generated, source)


def masked_view(task: InpaintTask) -> np.ndarray:
    """Source with the inpainting region set to neutral gray."""
    return np.where(task.mask[..., None] > 0.5, NEUTRAL_GRAY, task.source)

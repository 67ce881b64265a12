"""Synthetic class-conditional images, batch pipelines and the diffusion loss.

Class ``c`` of ``C`` is an oriented sinusoid::

    f_c     = 1 + 0.5 * (c mod 4)        cycles per image side
    theta_c = pi * c / C                 orientation
    img     = 0.7 * sin(2 pi f_c (u cos theta_c + v sin theta_c) + phi) + blob + noise

with ``u, v`` in ``[0, 1)``, a per-sample phase ``phi ~ U(-pi/4, pi/4)``, a
Gaussian blob of amplitude ``U(0.2, 0.5)``, width 2.5 px at a uniform random
centre, and ``N(0, 0.05^2)`` pixel noise.  Values are clipped to [-1, 1].
The phase jitter is bounded so class-mean images stay distinct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .numerics import SeededRng, Tensor, ops

PIPELINES = ("vanilla", "full_class", "context_class", "context_similarity")

SIGNAL_AMPLITUDE = 0.7
PIXEL_NOISE = 0.05
BLOB_WIDTH = 2.5


def class_frequency(c: int) -> float:
    return 1.0 + 0.5 * (c % 4)


def class_angle(c: int, C: int) -> float:
    return math.pi * c / C


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (N, S, S) float32
    labels: np.ndarray  # (N,) int64
    seed: int
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


def gen_synthetic_dataset(seed: int, N: int, C: int, image_size: int = 16, split: int = 0) -> SyntheticDataset:
    """Regenerable dataset; ``split`` selects an independent stream (0 train, 1 val, ...)."""
    if not N >= C >= 2:
        raise ConfigError(f"dataset needs N >= C >= 2, got N={N}, C={C}")
    rng = SeededRng(seed).split("data", split).generator
    labels = rng.permutation(np.arange(N) % C).astype(np.int64)
    s = image_size
    grid = np.arange(s, dtype=np.float64)
    u = (grid / s)[None, :]  # columns
    v = (grid / s)[:, None]  # rows
    phases = rng.uniform(-math.pi / 4, math.pi / 4, N)
    blob_amp = rng.uniform(0.2, 0.5, N)
    centres = rng.uniform(0, s, (N, 2))
    noise = rng.standard_normal((N, s, s)) * PIXEL_NOISE
    images = np.empty((N, s, s))
    for i in range(N):
        c = int(labels[i])
        f, th = class_frequency(c), class_angle(c, C)
        wave = SIGNAL_AMPLITUDE * np.sin(2 * math.pi * f * (u * math.cos(th) + v * math.sin(th)) + phases[i])
        cy, cx = centres[i]
        blob = blob_amp[i] * np.exp(-((grid[:, None] - cy) ** 2 + (grid[None, :] - cx) ** 2) / (2 * BLOB_WIDTH**2))
        images[i] = wave + blob
    images = np.clip(images + noise, -1.0, 1.0).astype(np.float32)
    return SyntheticDataset(images, labels, seed, C)


class SimilarityIndex:
    """Cosine similarity on fixed 32-dim random projections of the pixels."""

    def __init__(self, dataset: SyntheticDataset, dim: int = 32):
        x = dataset.images.reshape(len(dataset), -1).astype(np.float64)
        proj = SeededRng(dataset.seed).split("features").generator.standard_normal((x.shape[1], dim))
        feats = x @ proj / math.sqrt(x.shape[1])
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        self.features = feats / np.maximum(norms, 1e-12)

    def similarity(self, i: int) -> np.ndarray:
        return self.features @ self.features[i]

    def ranked(self, i: int) -> np.ndarray:
        """Indices by decreasing similarity to ``i``; ties broken by index."""
        sim = self.similarity(i)
        return np.lexsort((np.arange(len(sim)), -sim))

    def nearest(self, i: int, k: int) -> np.ndarray:
        return self.ranked(i)[:k]

    def farthest_quartile(self, i: int) -> np.ndarray:
        order = self.ranked(i)
        q = max(1, len(order) // 4)
        return order[-q:]


@dataclass(frozen=True)
class BatchSpec:
    alpha: float = 0.75
    b: int = 16
    mode: str = "context_class"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"train.alpha must be in [0, 1], got {self.alpha}")
        if self.b < 1:
            raise ConfigError("train.batch must be >= 1")
        if self.mode not in PIPELINES:
            raise ConfigError(f"train.pipeline must be one of {PIPELINES}, got {self.mode!r}")

    @property
    def n_similar(self) -> int:
        return math.ceil(round(self.alpha * self.b, 9))


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    n_similar: int


def _draw(rng: np.random.Generator, pool: np.ndarray, k: int, what: str) -> np.ndarray:
    if k == 0:
        return pool[:0]
    if len(pool) < k:
        raise DataError(f"{what} has {len(pool)} samples, need {k}")
    return rng.choice(pool, size=k, replace=False)


def sample_batch(
    dataset: SyntheticDataset,
    spec: BatchSpec,
    anchor: Optional[int],
    rng: SeededRng | np.random.Generator,
    index: Optional[SimilarityIndex] = None,
) -> Batch:
    """One training batch; similar samples come first, then dissimilar ones."""
    gen = rng.generator if isinstance(rng, SeededRng) else rng
    b, k = spec.b, spec.n_similar
    n = len(dataset)
    if spec.mode == "vanilla":
        idx = _draw(gen, np.arange(n), b, "dataset")
        k = 0
    else:
        if anchor is None:
            raise DataError(f"pipeline {spec.mode!r} needs an anchor")
        c = int(dataset.labels[anchor])
        same = dataset.class_indices(c)
        if spec.mode == "full_class":
            idx = _draw(gen, same, b, f"class {c}")
            k = b
        elif spec.mode == "context_class":
            other = np.flatnonzero(dataset.labels != c)
            idx = np.concatenate([_draw(gen, same, k, f"class {c}"), _draw(gen, other, b - k, "other classes")])
        else:
            if index is None:
                raise DataError("context_similarity needs a SimilarityIndex")
            near = index.nearest(anchor, k)
            far = _draw(gen, index.farthest_quartile(anchor), b - k, "farthest quartile")
            idx = np.concatenate([near, far])
    idx = idx.astype(np.int64)
    return Batch(dataset.images[idx], dataset.labels[idx], idx, k)


def denoising_error(eps_hat: Tensor, eps: np.ndarray) -> Tensor:
    """Batch mean of the per-sample squared error summed over pixels."""
    diff = ops.sub(eps_hat, Tensor(eps, dtype=eps_hat.dtype))
    per = ops.sum(ops.mul(diff, diff), axis=tuple(range(1, diff.ndim)))
    return ops.mean(per)


def diffusion_loss(model, images, labels, t, eps, updates=None, **forward_kw) -> Tensor:
    """``mean_b || eps - eps_theta(x_t, t; W', P) ||^2`` with updates on the training path."""
    from .backbone import noising

    images = np.asarray(images)
    eps = np.asarray(eps, dtype=images.dtype)
    x_t = noising(images, t, eps, model.schedule)
    eps_hat = model(x_t, t, labels, updates=updates, **forward_kw)
    return denoising_error(eps_hat, eps)


@dataclass
class EvalDraws:
    """Fixed timesteps and noise for reproducible validation losses."""

    t: np.ndarray
    eps: np.ndarray

    @classmethod
    def make(cls, n: int, image_size: int, T: int, seed: int) -> "EvalDraws":
        rng = SeededRng(seed).split("eval")
        return cls(rng.integers(1, T + 1, n), rng.normal((n, image_size, image_size), dtype=np.float32))

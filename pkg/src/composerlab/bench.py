"""Static / test-time-training / Composer comparison, overhead and ablations.

Quality is scored with a toy Frechet distance on fixed random features::

    phi(x) = tanh(x_flat @ R / sqrt(pixels)),  R ~ N(0, 1) of shape (pixels, 32)
    F      = |mu_1 - mu_2|^2 + tr(S_1 + S_2 - 2 (S_1 S_2)^(1/2))

with the cross term evaluated as ``tr((S_1^(1/2) S_2 S_1^(1/2))^(1/2))`` through
symmetric eigendecompositions (eigenvalues clamped at 0) and ``1e-6 I`` added
to each covariance.

Memory is the high-water mark of live tensor bytes inside a job.  A job
first takes its own copy of every resident parameter (backbone, and the
composer for the composer strategy), so the peak includes weights plus
activations, like an accelerator's allocated-bytes counter.
"""

from __future__ import annotations

import csv
import gc
import logging
import math
import statistics
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backbone import Denoiser, UpdateSet, collect_adaptation_targets, sample_loop, weight_name
from .composer import Composer
from .composition import GenerationCounters, LowRankUpdate, merge
from .data import EvalDraws, SimilarityIndex, SyntheticDataset, diffusion_loss
from .errors import ConfigError, DataError, TrainingAbort
from .numerics import AdamWState, MemoryTracker, SeededRng, Tape, Tensor, adamw_step, backward, no_tape, track_memory
from .training import validation_loss

log = logging.getLogger(__name__)

FEATURE_DIM = 32
FEATURE_SEED = 0x5EED


# -- toy Frechet ---------------------------------------------------------------------


def frechet_features(images: np.ndarray, dim: int = FEATURE_DIM) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    R = SeededRng(FEATURE_SEED).split("features", x.shape[1]).generator.standard_normal((x.shape[1], dim))
    return np.tanh(x @ R / math.sqrt(x.shape[1]))


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def frechet_from_features(f1: np.ndarray, f2: np.ndarray, reg: float = 1e-6) -> float:
    mu1, mu2 = f1.mean(axis=0), f2.mean(axis=0)
    eye = np.eye(f1.shape[1])
    S1 = np.cov(f1, rowvar=False) + reg * eye
    S2 = np.cov(f2, rowvar=False) + reg * eye
    r1 = _sqrt_psd(S1)
    mid = r1 @ S2 @ r1
    cross = np.sqrt(np.clip(np.linalg.eigvalsh((mid + mid.T) / 2), 0.0, None)).sum()
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(S1) + np.trace(S2) - 2.0 * cross)


def toy_frechet(real: np.ndarray, generated: np.ndarray) -> float:
    if len(real) < 64 or len(generated) < 64:
        raise DataError(f"toy_frechet needs >= 64 samples per set, got {len(real)} and {len(generated)}")
    return frechet_from_features(frechet_features(real), frechet_features(generated))


# -- test-time training ----------------------------------------------------------------


@dataclass
class TTTSettings:
    steps: int = 20
    lr: float = 1e-3
    k: int = 16
    r: int = 8
    targets: tuple[str, ...] = ("Q", "V")


def same_class_neighbors(index: SimilarityIndex, dataset: SyntheticDataset, anchor: int, k: int) -> np.ndarray:
    """The ``k`` most similar samples of the anchor's class (anchor included)."""
    c = dataset.labels[anchor]
    order = index.ranked(anchor)
    same = order[dataset.labels[order] == c]
    if len(same) < k:
        raise DataError(f"class {c} has {len(same)} samples, need {k}")
    return same[:k]


def ttt_adapt(
    class_id: int,
    backbone: Denoiser,
    dataset: SyntheticDataset,
    settings: TTTSettings = TTTSettings(),
    seed: int = 0,
    index: Optional[SimilarityIndex] = None,
    counters: Optional[GenerationCounters] = None,
) -> UpdateSet:
    """Fine-tune fresh rank-``r`` factors on data similar to the instance.

    ``A`` starts random and ``B`` at zero, so the initial product is exactly
    zero.  Each step draws new timesteps and noise for the ``k`` neighbours
    and takes one AdamW step on the factors only.
    """
    if settings.steps < 0:
        raise ConfigError("ttt steps must be >= 0")
    cfg = backbone.config
    counters = counters if counters is not None else GenerationCounters()
    rng = SeededRng(seed).split("ttt", int(class_id))
    gen = rng.generator
    pool = dataset.class_indices(int(class_id))
    if len(pool) == 0:
        raise DataError(f"no samples of class {class_id}")
    index = index if index is not None else SimilarityIndex(dataset)
    anchor = int(gen.choice(pool))
    idx = same_class_neighbors(index, dataset, anchor, settings.k)
    images, labels = dataset.images[idx], dataset.labels[idx]
    dt = backbone.dtype
    targets = collect_adaptation_targets(cfg, settings.targets)
    params: dict[str, Tensor] = {}
    for layer, kind in targets:
        params[f"{layer}.{kind}.A"] = Tensor(rng.normal((cfg.d, settings.r), scale=cfg.d**-0.5, dtype=dt), True)
        params[f"{layer}.{kind}.B"] = Tensor(np.zeros((settings.r, cfg.d), dt), True)
    state = AdamWState(lr=settings.lr, weight_decay=0.0)
    for step in range(settings.steps):
        t = gen.integers(1, cfg.num_timesteps + 1, len(idx))
        eps = gen.standard_normal(images.shape).astype(dt)
        ups = {(l, k): LowRankUpdate(params[f"{l}.{k}.A"], params[f"{l}.{k}.B"]) for l, k in targets}
        with Tape() as tape:
            loss = diffusion_loss(backbone, images, labels, t, eps, updates=ups, counters=counters)
        if not math.isfinite(loss.item()):
            raise TrainingAbort(f"test-time training diverged at step {step} (loss {loss.item()})")
        grads = backward(loss, tape)
        counters.backward_calls += 1
        del tape, ups
        params = adamw_step(params, {k: grads[p] for k, p in params.items() if p in grads}, state)
    return {(l, k): LowRankUpdate(params[f"{l}.{k}.A"], params[f"{l}.{k}.B"]) for l, k in targets}


# -- strategies and one generation ---------------------------------------------------


STRATEGY_KINDS = ("static", "ttt", "composer")


@dataclass
class Strategy:
    kind: str
    ttt: TTTSettings = field(default_factory=TTTSettings)
    composer: Optional[Composer] = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}")
        if self.kind == "composer" and self.composer is None:
            raise ConfigError("composer strategy needs a trained composer")
        if self.kind == "ttt" and self.composer is not None and self.composer.config.r != self.ttt.r:
            raise ConfigError("test-time training must use the composer's rank")


@dataclass
class Generation:
    images: np.ndarray
    adapt_time: float
    sample_time: float
    adapt_peak: int
    sample_peak: int
    counters: GenerationCounters

    @property
    def total_time(self) -> float:
        return self.adapt_time + self.sample_time

    @property
    def peak(self) -> int:
        return max(self.adapt_peak, self.sample_peak)


@contextmanager
def _quiet_gc():
    """Collect first, then keep the cyclic collector out of timed regions."""
    gc.collect()
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def _own_copy(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data) for k, v in params.items()}


def generate_class(
    strategy: Strategy,
    backbone: Denoiser,
    class_id: int,
    samples: int,
    steps: int,
    seed: int,
    dataset: Optional[SyntheticDataset] = None,
    index: Optional[SimilarityIndex] = None,
) -> Generation:
    """One generation: adapt (if any), then ``steps``-step sampling of ``samples`` images.

    Runs under its own allocation tracker with job-owned parameter copies.
    Merging replaces the job's copy of each target weight, and the composer
    copy is released once it has produced the updates.  Time and peak bytes
    are recorded separately for the two phases.
    """
    counters = GenerationCounters()
    tracker = MemoryTracker()
    with track_memory(tracker), _quiet_gc():
        params = _own_copy(backbone.params)
        composer = None
        if strategy.kind == "composer":
            src = strategy.composer
            composer = src.with_params(_own_copy(src.params))
        tracker.reset_peak()
        model = Denoiser(backbone.config, params)
        merged = None
        t0 = time.perf_counter()
        if composer is not None:
            with no_tape():
                ups = composer.generate_single(class_id, model, counters)
            composer = None  # the generator is not needed for sampling
        elif strategy.kind == "ttt":
            if dataset is None:
                raise ConfigError("test-time training needs the dataset")
            ups = ttt_adapt(class_id, model, dataset, strategy.ttt, seed, index, counters)
        else:
            ups = None
        if ups is not None:
            merged = merge(model.target_weights(ups.keys()), ups, tag=f"class={class_id}", counters=counters)
            # the job owns its weights: merged copies replace the originals
            for key in ups:
                del params[weight_name(key)]
            model = Denoiser(backbone.config, params)
            del ups
        t1 = time.perf_counter()
        adapt_peak = tracker.peak
        tracker.reset_peak()
        rng = SeededRng(seed).split("sampler", int(class_id))
        images = sample_loop(model, class_id, steps, rng=rng, batch=samples, counters=counters, merged=merged)
        t2 = time.perf_counter()
        sample_peak = tracker.peak
    return Generation(images, t1 - t0, t2 - t1, adapt_peak, sample_peak, counters)


# -- comparison ----------------------------------------------------------------------


@dataclass
class StrategyResult:
    kind: str
    seed: int
    frechet: float = float("nan")
    val_loss: float = float("nan")
    time_per_generation: float = float("nan")
    adapt_time: float = float("nan")
    sample_time: float = float("nan")
    peak_bytes: int = 0
    merges_per_generation: float = float("nan")
    denoiser_calls_per_generation: float = float("nan")
    backward_calls_per_generation: float = float("nan")
    failed: bool = False
    error: str = ""


@dataclass
class BenchReport:
    results: list[StrategyResult]
    seeds: list[int]
    steps: int
    samples_per_class: int

    def medians(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        keys = ("frechet", "val_loss", "time_per_generation", "adapt_time", "sample_time", "peak_bytes")
        for kind in dict.fromkeys(r.kind for r in self.results):
            rows = [r for r in self.results if r.kind == kind and not r.failed]
            out[kind] = {k: (statistics.median(getattr(r, k) for r in rows) if rows else float("nan")) for k in keys}
        return out

    def write_csv(self, path: str, extra: Optional[dict] = None) -> None:
        fields = list(asdict(self.results[0]).keys()) if self.results else ["kind"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for r in self.results:
                w.writerow(asdict(r))


def strategy_val_loss(
    strategy: Strategy,
    backbone: Denoiser,
    val: SyntheticDataset,
    draws: EvalDraws,
    train: Optional[SyntheticDataset] = None,
    seed: int = 0,
    index: Optional[SimilarityIndex] = None,
) -> float:
    if strategy.kind == "static":
        return validation_loss(backbone, val, draws)
    if strategy.kind == "composer":
        return validation_loss(backbone, val, draws, strategy.composer)
    # TTT: one tuned update set per class, applied to that class's samples
    total = 0.0
    for c in range(backbone.config.num_classes):
        sel = np.flatnonzero(val.labels == c)
        if len(sel) == 0:
            continue
        ups = ttt_adapt(c, backbone, train, strategy.ttt, seed, index)
        with no_tape():
            loss = diffusion_loss(backbone, val.images[sel], val.labels[sel], draws.t[sel], draws.eps[sel], updates=ups)
        total += loss.item() * len(sel)
    return total / len(val)


def run_comparison(
    strategies: Sequence[Strategy],
    backbone: Denoiser,
    train: SyntheticDataset,
    heldout: SyntheticDataset,
    seeds: Sequence[int] = (0, 1, 2),
    steps: int = 50,
    samples_per_class: int = 12,
    draws: Optional[EvalDraws] = None,
    with_val_loss: bool = True,
) -> BenchReport:
    """Per strategy and seed: generate every class, score, time and measure."""
    cfg = backbone.config
    index = SimilarityIndex(train)
    if draws is None:
        draws = EvalDraws.make(len(heldout), cfg.image_size, cfg.num_timesteps, 0)
    results = []
    for strat in strategies:
        for seed in seeds:
            res = StrategyResult(strat.kind, int(seed))
            try:
                gens = [
                    generate_class(strat, backbone, c, samples_per_class, steps, seed, train, index)
                    for c in range(cfg.num_classes)
                ]
                images = np.concatenate([g.images for g in gens])
                res.frechet = toy_frechet(heldout.images, images)
                res.adapt_time = statistics.median(g.adapt_time for g in gens)
                res.sample_time = statistics.median(g.sample_time for g in gens)
                res.time_per_generation = statistics.median(g.total_time for g in gens)
                res.peak_bytes = max(g.peak for g in gens)
                n = len(gens)
                res.merges_per_generation = sum(g.counters.merges for g in gens) / n
                res.denoiser_calls_per_generation = sum(g.counters.denoiser_calls for g in gens) / n
                res.backward_calls_per_generation = sum(g.counters.backward_calls for g in gens) / n
                if with_val_loss:
                    res.val_loss = strategy_val_loss(strat, backbone, heldout, draws, train, seed, index)
            except Exception as exc:  # one strategy failing must not sink the report
                log.exception("strategy %s seed %s failed", strat.kind, seed)
                res.failed, res.error = True, f"{type(exc).__name__}: {exc}"
            results.append(res)
    return BenchReport(results, list(seeds), steps, samples_per_class)


@dataclass
class Overhead:
    kind: str
    adapt_time: float
    sample_time: float
    adapt_peak: int
    sample_peak: int

    @property
    def time(self) -> float:
        return self.adapt_time + self.sample_time

    @property
    def peak(self) -> int:
        return max(self.adapt_peak, self.sample_peak)


def measure_overhead(
    strategy: Strategy,
    backbone: Denoiser,
    steps: int = 50,
    samples: int = 16,
    class_ids: Sequence[int] = (0, 1, 2),
    seed: int = 0,
    dataset: Optional[SyntheticDataset] = None,
    index: Optional[SimilarityIndex] = None,
) -> Overhead:
    """Median phase times and worst phase peaks over a few generations."""
    gens = [generate_class(strategy, backbone, c, samples, steps, seed, dataset, index) for c in class_ids]
    return Overhead(
        strategy.kind,
        statistics.median(g.adapt_time for g in gens),
        statistics.median(g.sample_time for g in gens),
        max(g.adapt_peak for g in gens),
        max(g.sample_peak for g in gens),
    )


# -- ablations ---------------------------------------------------------------------------


ABLATION_GRIDS: dict[str, tuple] = {
    "r": (4, 8, 16, 32),
    "alpha": (0.0, 0.25, 0.5, 0.75, 1.0),
    "d_model": (32, 64, 128),
    "targets": (("Q",), ("V",), ("Q", "V"), ("Q", "K", "V", "O")),
    "attention": ("standard", "global_local"),
    "generator_arch": ("transformer", "mlp"),
    "pipeline": ("vanilla", "full_class", "context_class", "context_similarity"),
    "token_init": ("projected", "constant"),
}

ALLOWED = {
    "r": {4, 8, 16, 32},
    "alpha": {0.0, 0.25, 0.5, 0.75, 1.0},
    "attention": {"standard", "global_local"},
    "generator_arch": {"transformer", "mlp"},
    "pipeline": {"vanilla", "full_class", "context_class", "context_similarity"},
    "token_init": {"projected", "constant"},
}

ABLATION_FIELDS = ("axis", "value", "seed", "toy_frechet", "val_loss")


def validate_grid(axis: str, grid: Sequence) -> list:
    if axis not in ABLATION_GRIDS:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_GRIDS)}")
    grid = list(grid)
    if not grid:
        raise ConfigError(f"empty grid for axis {axis!r}")
    for v in grid:
        if axis == "targets":
            vs = {str(x).upper() for x in v}
            if not vs or not vs <= {"Q", "K", "V", "O"}:
                raise ConfigError(f"invalid targets grid value {v!r}")
        elif axis == "d_model":
            if not (isinstance(v, (int, np.integer)) and v > 0):
                raise ConfigError(f"invalid d_model grid value {v!r}")
        elif v not in ALLOWED[axis]:
            raise ConfigError(f"invalid {axis} grid value {v!r}; allowed {sorted(ALLOWED[axis], key=str)}")
    return grid


def format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return "".join(str(x) for x in v)
    return str(v)


def write_rows(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(ABLATION_FIELDS))
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in ABLATION_FIELDS})

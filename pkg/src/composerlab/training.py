"""Backbone pretraining and Composer training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .backbone import Denoiser, DenoiserConfig
from .composer import Composer, ComposerConfig
from .data import BatchSpec, EvalDraws, SimilarityIndex, SyntheticDataset, diffusion_loss, sample_batch
from .errors import IntegrityError, TrainingAbort
from .numerics import AdamWState, SeededRng, Tape, adamw_step, backward, no_tape

log = logging.getLogger(__name__)

# Validation loss (summed squared error per 16x16 image) a pretrained
# backbone must reach.  A zero predictor scores the pixel count, 256.
PRETRAIN_VAL_THRESHOLD = 40.0


@dataclass
class TrainConfig:
    epochs: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.05
    batch: int = 16
    alpha: float = 0.75
    pipeline: str = "context_class"
    seed: int = 0
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        from .errors import ConfigError

        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("train.lr must be > 0")


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 2e-3
    weight_decay: float = 0.0
    batch: int = 32
    seed: int = 0


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)


def validation_loss(
    model: Denoiser,
    dataset: SyntheticDataset,
    draws: EvalDraws,
    composer: Optional[Composer] = None,
    batch: int = 128,
    **forward_kw,
) -> float:
    """Mean denoising loss over ``dataset`` with fixed ``draws``.

    With a composer, every element gets updates generated from its class.
    """
    total = 0.0
    n = len(dataset)
    with no_tape():
        for s in range(0, n, batch):
            sl = slice(s, min(n, s + batch))
            labels = dataset.labels[sl]
            ups = composer.generate(labels, model) if composer is not None else None
            loss = diffusion_loss(model, dataset.images[sl], labels, draws.t[sl], draws.eps[sl], updates=ups, **forward_kw)
            total += loss.item() * (sl.stop - sl.start)
    return total / n


def _check_finite(loss: float, what: str, dump: Optional[Callable[[], None]] = None) -> None:
    if not math.isfinite(loss):
        if dump is not None:
            dump()
        raise TrainingAbort(f"{what}: non-finite loss")


def pretrain_backbone(
    config: DenoiserConfig,
    train: SyntheticDataset,
    val: SyntheticDataset,
    pcfg: PretrainConfig = PretrainConfig(),
    dump: Optional[Callable[[Denoiser], None]] = None,
    threshold: float = PRETRAIN_VAL_THRESHOLD,
) -> tuple[Denoiser, History]:
    """Train a denoiser from scratch, then return it frozen.

    ``dump`` receives the model when training aborts on a non-finite loss.
    """
    rng = SeededRng(pcfg.seed)
    model = Denoiser.init(config, rng.split("init"))
    model.set_trainable(True)
    state = AdamWState(lr=pcfg.lr, weight_decay=pcfg.weight_decay)
    draws = EvalDraws.make(len(val), config.image_size, config.num_timesteps, pcfg.seed)
    hist = History()
    n = len(train)
    steps = max(1, n // pcfg.batch)
    total_steps = steps * pcfg.epochs
    base_lr = pcfg.lr
    for epoch in range(pcfg.epochs):
        erng = rng.split("data", 100 + epoch).generator
        nrng = rng.split("noise", epoch).generator
        order = erng.permutation(n)
        running = 0.0
        for s in range(steps):
            # cosine decay to 10% of the base rate
            frac = (epoch * steps + s) / total_steps
            state.lr = base_lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
            idx = order[s * pcfg.batch : (s + 1) * pcfg.batch]
            t = nrng.integers(1, config.num_timesteps + 1, len(idx))
            eps = nrng.standard_normal((len(idx), config.image_size, config.image_size)).astype(np.float32)
            with Tape() as tape:
                loss = diffusion_loss(model, train.images[idx], train.labels[idx], t, eps)
            lv = loss.item()
            _check_finite(lv, f"pretraining epoch {epoch} step {s}", (lambda: dump(model)) if dump else None)
            grads = backward(loss, tape)
            del tape
            named = {k: grads.get(p) for k, p in model.params.items()}
            named = {k: g for k, g in named.items() if g is not None}
            model.params = adamw_step(model.params, named, state)
            running += lv
        hist.train_loss.append(running / steps)
        hist.val_loss.append(validation_loss(model, val, draws))
        log.info("pretrain epoch %d train %.3f val %.3f", epoch, hist.train_loss[-1], hist.val_loss[-1])
    model.set_trainable(False)
    if hist.val_loss[-1] >= threshold:
        raise TrainingAbort(
            f"pretraining ended at validation loss {hist.val_loss[-1]:.3f}, above threshold {threshold}"
        )
    return model, hist


def train_composer(
    backbone: Denoiser,
    composer: Composer,
    tcfg: TrainConfig,
    train: SyntheticDataset,
    val: SyntheticDataset,
    index: Optional[SimilarityIndex] = None,
    draws: Optional[EvalDraws] = None,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> tuple[Composer, History]:
    """Train composer parameters on the frozen backbone.

    ``History.val_loss[0]`` is the untrained (epoch 0) value; entry ``e`` is
    after ``e`` epochs.  The backbone checksum is verified after every epoch.
    """
    if tcfg.pipeline == "context_similarity" and index is None:
        index = SimilarityIndex(train)
    spec = BatchSpec(tcfg.alpha, tcfg.batch, tcfg.pipeline)
    rng = SeededRng(tcfg.seed)
    cfg = backbone.config
    if draws is None:
        draws = EvalDraws.make(len(val), cfg.image_size, cfg.num_timesteps, 0)
    checksum = backbone.checksum()
    backbone.set_trainable(False)
    composer.set_trainable(True)
    state = AdamWState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    hist = History()
    hist.val_loss.append(validation_loss(backbone, val, draws, composer))
    steps = tcfg.steps_per_epoch or max(1, len(train) // tcfg.batch)
    for epoch in range(tcfg.epochs):
        srng = rng.split("sampler", epoch).generator
        nrng = rng.split("noise", epoch).generator
        running = 0.0
        for s in range(steps):
            anchor = int(srng.integers(len(train)))
            batch = sample_batch(train, spec, anchor, srng, index)
            t = nrng.integers(1, cfg.num_timesteps + 1, spec.b)
            eps = nrng.standard_normal((spec.b, cfg.image_size, cfg.image_size)).astype(np.float32)
            with Tape() as tape:
                ups = composer.generate(batch.labels, backbone)
                loss = diffusion_loss(backbone, batch.images, batch.labels, t, eps, updates=ups)
            lv = loss.item()
            _check_finite(lv, f"composer epoch {epoch} step {s}")
            grads = backward(loss, tape)
            del tape, ups
            named = {k: grads[p] for k, p in composer.params.items() if p in grads}
            composer.params = adamw_step(composer.params, named, state)
            running += lv
        if backbone.checksum() != checksum:
            raise IntegrityError(f"backbone weights changed during composer epoch {epoch}")
        hist.train_loss.append(running / steps)
        hist.val_loss.append(validation_loss(backbone, val, draws, composer))
        log.info("composer epoch %d train %.3f val %.3f", epoch, hist.train_loss[-1], hist.val_loss[-1])
        if on_epoch is not None:
            on_epoch(epoch, hist.train_loss[-1], hist.val_loss[-1])
    composer.set_trainable(False)
    return composer, hist


def new_composer(ccfg: ComposerConfig, backbone: Denoiser, seed: int) -> Composer:
    return Composer.init(ccfg, backbone.config, SeededRng(seed).split("init", 1), dtype=backbone.dtype)

"""End-to-end pipelines shared by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import Denoiser, sample_loop
from .bench import (
    ABLATION_FIELDS,
    Strategy,
    TTTSettings,
    format_value,
    generate_class,
    toy_frechet,
    validate_grid,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .composer import Composer, ComposerConfig
from .config import RunConfig
from .data import EvalDraws, SimilarityIndex, SyntheticDataset, gen_synthetic_dataset
from .errors import MissingPrerequisite
from .numerics import SeededRng, Tensor, no_tape
from .quant import QuantConfig, QuantSetup, train_quant_composer
from .training import History, new_composer, pretrain_backbone, train_composer, validation_loss

log = logging.getLogger(__name__)

HELDOUT_FRACTION = 4  # held-out split has N // 4 samples


@dataclass
class Data:
    train: SyntheticDataset
    heldout: SyntheticDataset
    draws: EvalDraws
    index: SimilarityIndex


def make_data(cfg: RunConfig) -> Data:
    """Training and held-out splits plus fixed evaluation draws, all keyed on ``cfg.seed``."""
    seed, N, C, S = cfg["seed"], cfg["dataset.N"], cfg["dataset.C"], cfg["backbone.image_size"]
    train = gen_synthetic_dataset(seed, N, C, S, split=0)
    heldout = gen_synthetic_dataset(seed, max(C, N // HELDOUT_FRACTION), C, S, split=1)
    draws = EvalDraws.make(len(heldout), S, cfg["backbone.T"], seed)
    return Data(train, heldout, draws, SimilarityIndex(train))


# -- persistence ---------------------------------------------------------------------


def save_backbone(path, backbone: Denoiser) -> None:
    save_checkpoint(path, {k: v.data for k, v in backbone.params.items()})


def load_backbone(path, cfg: RunConfig) -> Denoiser:
    if not Path(path).is_file():
        raise MissingPrerequisite(f"backbone checkpoint not found: {path}", hint="run `composerlab pretrain --out DIR` first")
    arrays = load_checkpoint(path)
    model = Denoiser(cfg.backbone_config(), {k: Tensor(v) for k, v in arrays.items()})
    model.set_trainable(False)
    return model


def save_composer(path, composer: Composer) -> None:
    save_checkpoint(path, {k: v.data for k, v in composer.params.items()})
    meta = {"config": composer.config.__dict__, "bank_mode": composer.bank_mode, "weight_bits": composer.weight_bits}
    Path(str(path) + ".json").write_text(json.dumps(meta, default=list))


def load_composer(path, backbone: Denoiser) -> Composer:
    meta_path = Path(str(path) + ".json")
    if not Path(path).is_file() or not meta_path.is_file():
        raise MissingPrerequisite(f"composer checkpoint not found: {path}",
                                  hint="run `composerlab train-composer --out DIR` first")
    meta = json.loads(meta_path.read_text())
    c = dict(meta["config"])
    c["targets"] = tuple(c["targets"])
    ccfg = ComposerConfig(**c)
    arrays = load_checkpoint(path)
    composer = Composer(ccfg, backbone.config, {k: Tensor(v) for k, v in arrays.items()}, meta["bank_mode"])
    composer.weight_bits = meta.get("weight_bits")
    composer.set_trainable(False)
    return composer


# -- pipelines --------------------------------------------------------------------------


def pretrain(cfg: RunConfig, data: Data) -> tuple[Denoiser, History]:
    return pretrain_backbone(cfg.backbone_config(), data.train, data.heldout, cfg.pretrain_config())


def fit_composer(
    cfg: RunConfig,
    backbone: Denoiser,
    data: Data,
    seed: Optional[int] = None,
    on_epoch=None,
) -> tuple[Composer, History]:
    """Train a composer from ``cfg`` and freeze its token bank for deployment."""
    seed = cfg["seed"] if seed is None else seed
    composer = new_composer(cfg.composer_config(), backbone, seed)
    composer, hist = train_composer(
        backbone, composer, cfg.train_config(seed), data.train, data.heldout, data.index, data.draws, on_epoch
    )
    return composer.freeze_token_bank(backbone), hist


def generate_all(
    strategy: Strategy,
    backbone: Denoiser,
    cfg: RunConfig,
    seed: int,
    data: Optional[Data] = None,
) -> np.ndarray:
    """``bench.samples_per_class`` images for every class, ``bench.steps`` sampling steps."""
    imgs = [
        generate_class(strategy, backbone, c, cfg["bench.samples_per_class"], cfg["bench.steps"], seed,
                       data.train if data else None, data.index if data else None).images
        for c in range(backbone.config.num_classes)
    ]
    return np.concatenate(imgs)


@dataclass
class Quality:
    val_loss: float
    frechet: float


def evaluate_quality(
    backbone: Denoiser, composer: Optional[Composer], cfg: RunConfig, data: Data, seed: int
) -> Quality:
    """Held-out denoising loss and toy-Frechet of generated samples."""
    vl = validation_loss(backbone, data.heldout, data.draws, composer)
    strat = Strategy("composer", composer=composer) if composer is not None else Strategy("static")
    images = generate_all(strat, backbone, cfg, seed, data)
    return Quality(vl, toy_frechet(data.heldout.images, images))


_AXIS_KEYS = {
    "r": "composer.r",
    "alpha": "train.alpha",
    "d_model": "composer.d_model",
    "targets": "composer.targets",
    "attention": "composer.attention",
    "generator_arch": "composer.arch",
    "pipeline": "train.pipeline",
    "token_init": "composer.token_init",
}


def run_ablation(
    axis: str,
    grid: Sequence,
    cfg: RunConfig,
    backbone: Denoiser,
    data: Data,
    seeds: Sequence[int],
) -> list[dict]:
    """Train and evaluate one composer per (grid value, seed); rows for the CSV.

    The grid is validated before any training starts.
    """
    grid = validate_grid(axis, grid)
    rows = []
    for value in grid:
        point = cfg.with_overrides([f"{_AXIS_KEYS[axis]}={format_value(value)}"])
        for seed in seeds:
            composer, _ = fit_composer(point, backbone, data, seed)
            q = evaluate_quality(backbone, composer, point, data, seed)
            rows.append({"axis": axis, "value": format_value(value), "seed": seed,
                         "toy_frechet": q.frechet, "val_loss": q.val_loss})
    assert all(set(ABLATION_FIELDS) <= set(r) for r in rows)
    return rows


# -- quantization -----------------------------------------------------------------------


@dataclass
class QuantResult:
    w_bits: int
    seed: int
    kd_base: float
    kd_composer: float
    frechet_base: float
    frechet_composer: float
    val_kd: list


def quant_generate(setup: QuantSetup, composer: Optional[Composer], class_id: int, samples: int, steps: int,
                   seed: int) -> np.ndarray:
    """Sample from the quantized student, adapted by ``composer`` when given."""
    rng = SeededRng(seed).split("sampler", int(class_id))
    if composer is None:
        return sample_loop(setup.student, class_id, steps, rng=rng, batch=samples, quant=setup.context())
    with no_tape():
        ups, gammas = composer.generate_single_with_gamma(class_id, setup.student)
    return sample_loop(setup.student, class_id, steps, updates=ups, rng=rng, batch=samples,
                       quant=setup.context(gammas))


def run_quant(cfg: RunConfig, backbone: Denoiser, data: Data, w_bits: int, seed: int) -> QuantResult:
    """Quant-aware composer for one bit-width and seed, against the zero-update student."""
    qcfg = QuantConfig(w_bits, cfg["quant.a_bits"])
    setup = QuantSetup.build(backbone, qcfg, data.train, seed)
    composer = new_composer(cfg.composer_config(quant=True), setup.student, seed)
    composer, rep = train_quant_composer(setup, composer, cfg.train_config(seed), data.train, data.heldout,
                                         data.draws, data.index)
    M, S, C = cfg["bench.samples_per_class"], cfg["bench.steps"], backbone.config.num_classes
    base = np.concatenate([quant_generate(setup, None, c, M, S, seed) for c in range(C)])
    comp = np.concatenate([quant_generate(setup, composer, c, M, S, seed) for c in range(C)])
    return QuantResult(
        w_bits,
        seed,
        rep.kd_before,
        rep.kd_after,
        toy_frechet(data.heldout.images, base),
        toy_frechet(data.heldout.images, comp),
        rep.val_kd,
    )


def relative_gain(base: float, adapted: float) -> float:
    return (base - adapted) / base


def median(xs) -> float:
    return float(statistics.median(xs))


def ttt_strategy(cfg: RunConfig) -> Strategy:
    return Strategy("ttt", ttt=TTTSettings(r=cfg["composer.r"]))

"""Fake-quantized backbone and the quantization-aware Composer.

Every block linear (attention Q, K, V, O and both feed-forward weights) is
rounded to a symmetric per-tensor grid with max-abs scale.  Inputs to those
linears are fake-quantized to ``activation_bits`` with scales calibrated once
from full-precision activations.  For adapted targets the input is first
multiplied by a per-instance, per-target ``gamma > 0`` from the Composer, so
each adapted projection computes ``h_q = (W_q + A B) Q(gamma x)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .backbone import Denoiser, Target, UpdateSet, noising
from .composer import Composer
from .composition import LowRankUpdate, apply_inference_path, apply_training_path, MergedWeights
from .data import BatchSpec, EvalDraws, SimilarityIndex, SyntheticDataset, sample_batch
from .errors import ConfigError, DimensionError, IntegrityError
from .numerics import AdamWState, SeededRng, Tape, Tensor, adamw_step, backward, no_tape, ops

log = logging.getLogger(__name__)

PASSTHROUGH_BITS = 32


@dataclass(frozen=True)
class QuantConfig:
    weight_bits: int = 4
    activation_bits: int = 8

    def __post_init__(self):
        if self.weight_bits not in (2, 4, 8, PASSTHROUGH_BITS):
            raise ConfigError(f"quant.w_bits must be one of 2, 4, 8 (or 32 to disable), got {self.weight_bits}")
        if self.activation_bits not in (8, PASSTHROUGH_BITS):
            raise ConfigError(f"quant.a_bits must be 8 (or 32 to disable), got {self.activation_bits}")

    @property
    def enabled(self) -> bool:
        return self.weight_bits != PASSTHROUGH_BITS or self.activation_bits != PASSTHROUGH_BITS


def quantized_weight_names(backbone: Denoiser) -> list[str]:
    names = []
    for layer in range(backbone.config.num_layers):
        names += [f"layers.{layer}.attn.{k}" for k in "QKVO"]
        names += [f"layers.{layer}.ff1.w", f"layers.{layer}.ff2.w"]
    return names


def max_abs_scale(x: np.ndarray, bits: int, what: str = "tensor") -> float:
    top = float(np.max(np.abs(x))) if x.size else 0.0
    if top == 0.0:
        warnings.warn(f"{what} is all zero; using quantizer scale 1", RuntimeWarning, stacklevel=2)
        return 1.0
    return top / ops.quant_levels(bits)


@dataclass
class QuantizedBackbone:
    weights: dict[str, Tensor]
    scales: dict[str, float]
    config: QuantConfig

    def student(self, backbone: Denoiser) -> Denoiser:
        """The backbone with its block linears replaced by grid values."""
        return backbone.with_params(self.weights)


def quantize_backbone(backbone: Denoiser, qcfg: QuantConfig) -> QuantizedBackbone:
    """Per-tensor max-abs rounding of every block linear."""
    weights, scales = {}, {}
    for name in quantized_weight_names(backbone):
        W = backbone.params[name]
        if qcfg.weight_bits == PASSTHROUGH_BITS:
            weights[name], scales[name] = W, 0.0
            continue
        s = max_abs_scale(W.data, qcfg.weight_bits, name)
        with no_tape():
            weights[name] = Tensor._wrap(ops.fake_quantize(W, qcfg.weight_bits, s).data)
        scales[name] = s
    return QuantizedBackbone(weights, scales, qcfg)


class QuantContext:
    """Forward hooks handed to :meth:`Denoiser.forward` as ``quant``.

    ``weight`` serves the (quantized) weight for a linear; ``prepare_input``
    scales by gamma for adapted targets and fake-quantizes the activation.
    """

    def __init__(
        self,
        weights: dict[str, Tensor],
        act_scales: dict[str, float],
        activation_bits: int,
        gammas: Optional[dict[Target, Tensor]] = None,
    ):
        self.weights = weights
        self.act_scales = act_scales
        self.activation_bits = activation_bits
        self.gammas = gammas or {}

    def weight(self, name: str) -> Tensor:
        return self.weights[name]

    def prepare_input(self, name: str, key, x: Tensor) -> Tensor:
        g = self.gammas.get(key) if key is not None else None
        if g is not None:
            if g.ndim == 1:
                g = ops.reshape(g, (g.shape[0],) + (1,) * (x.ndim - 1))
            x = ops.mul(x, g)
        if self.activation_bits == PASSTHROUGH_BITS:
            return x
        return ops.fake_quantize(x, self.activation_bits, self.act_scales[name])


class _Recorder:
    """Full-precision pass that records max |input| per quantized linear."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params
        self.top: dict[str, float] = {}

    def weight(self, name):
        return self.params[name]

    def prepare_input(self, name, key, x):
        self.top[name] = max(self.top.get(name, 0.0), float(np.max(np.abs(x.data))))
        return x


def calibrate_activations(teacher: Denoiser, images, labels, t, eps, bits: int) -> dict[str, float]:
    """Max-abs activation scales from one full-precision pass."""
    rec = _Recorder(teacher.params)
    x_t = noising(np.asarray(images), t, np.asarray(eps, dtype=images.dtype), teacher.schedule)
    with no_tape():
        teacher(x_t, t, labels, quant=rec)
    if bits == PASSTHROUGH_BITS:
        return {k: 1.0 for k in rec.top}
    return {k: (v / ops.quant_levels(bits) if v > 0 else 1.0) for k, v in rec.top.items()}


def quant_forward(
    x: Tensor,
    W_q: Tensor,
    update: Optional[LowRankUpdate],
    gamma,
    activation_bits: int,
    act_scale: float,
    merged: Optional[MergedWeights] = None,
) -> Tensor:
    """``(W_q + A B) Q(gamma x)`` for one linear; merged weights take precedence."""
    if isinstance(gamma, Tensor):
        if np.any(gamma.data <= 0):
            raise ConfigError("gamma must be positive")
        g = gamma if gamma.ndim == 0 else ops.reshape(gamma, (gamma.shape[0],) + (1,) * (x.ndim - 1))
        xs = ops.mul(x, g)
    else:
        if not gamma > 0:
            raise ConfigError("gamma must be positive")
        xs = x if gamma == 1 else ops.mul(x, float(gamma))
    xq = xs if activation_bits == PASSTHROUGH_BITS else ops.fake_quantize(xs, activation_bits, act_scale)
    if merged is not None:
        return apply_inference_path(xq, merged, next(iter(merged.weights)))
    return apply_training_path(xq, W_q, update)


def kd_loss(h_teacher, h_q: Tensor) -> Tensor:
    """Squared L2 distance: summed over elements, averaged over the batch axis."""
    ht = h_teacher if isinstance(h_teacher, Tensor) else Tensor(h_teacher, dtype=h_q.dtype)
    if ht.shape != h_q.shape:
        raise DimensionError(f"teacher shape {ht.shape} != student shape {h_q.shape}")
    diff = ops.sub(h_q, ht.detach())
    sq = ops.mul(diff, diff)
    if sq.ndim <= 1:
        return ops.sum(sq)
    return ops.mean(ops.sum(sq, axis=tuple(range(1, sq.ndim))))


def composer_quant_generate(composer: Composer, class_ids, student: Denoiser, counters=None):
    """``(UpdateSet, gammas)``: per-instance updates plus one gamma per target."""
    if not composer.config.quant:
        raise ConfigError("composer was not built in quant mode (no gamma seed tokens)")
    return composer.generate_with_gamma(class_ids, student, counters)


# -- training ----------------------------------------------------------------------


@dataclass
class QuantSetup:
    """Everything a quantized evaluation needs, built once per (backbone, bits)."""

    teacher: Denoiser
    student: Denoiser
    qbackbone: QuantizedBackbone
    act_scales: dict[str, float]

    @classmethod
    def build(cls, teacher: Denoiser, qcfg: QuantConfig, calib: SyntheticDataset, seed: int = 0, n: int = 128):
        qb = quantize_backbone(teacher, qcfg)
        rng = SeededRng(seed).split("calibration")
        n = min(n, len(calib))
        cfg = teacher.config
        t = rng.integers(1, cfg.num_timesteps + 1, n)
        eps = rng.normal((n, cfg.image_size, cfg.image_size), dtype=teacher.dtype)
        scales = calibrate_activations(teacher, calib.images[:n], calib.labels[:n], t, eps, qcfg.activation_bits)
        return cls(teacher, qb.student(teacher), qb, scales)

    def context(self, gammas=None) -> QuantContext:
        return QuantContext(self.qbackbone.weights, self.act_scales, self.qbackbone.config.activation_bits, gammas)


def kd_batch_loss(setup: QuantSetup, composer: Optional[Composer], images, labels, t, eps) -> Tensor:
    """Sum over adapted targets of the per-layer KD loss on one batch."""
    teacher = setup.teacher
    x_t = noising(np.asarray(images), t, np.asarray(eps, dtype=images.dtype), teacher.schedule)
    cap_t: dict = {}
    with no_tape():
        teacher(x_t, t, labels, capture=cap_t)
    if composer is not None:
        ups, gammas = composer_quant_generate(composer, labels, setup.student)
        targets = composer.targets
    else:
        ups, gammas, targets = None, None, sorted(cap_t)
    cap_q: dict = {}
    setup.student(x_t, t, labels, updates=ups, quant=setup.context(gammas), capture=cap_q)
    total = None
    for tgt in targets:
        term = kd_loss(cap_t[tgt], cap_q[tgt])
        total = term if total is None else ops.add(total, term)
    return total


def validation_kd(setup: QuantSetup, composer: Optional[Composer], val: SyntheticDataset, draws: EvalDraws,
                  targets=None, batch: int = 128) -> float:
    total = 0.0
    n = len(val)
    with no_tape():
        for s in range(0, n, batch):
            sl = slice(s, min(n, s + batch))
            if composer is None and targets is not None:
                loss = _baseline_kd(setup, targets, val.images[sl], val.labels[sl], draws.t[sl], draws.eps[sl])
            else:
                loss = kd_batch_loss(setup, composer, val.images[sl], val.labels[sl], draws.t[sl], draws.eps[sl])
            total += loss.item() * (sl.stop - sl.start)
    return total / n


def _baseline_kd(setup, targets, images, labels, t, eps) -> Tensor:
    teacher = setup.teacher
    x_t = noising(np.asarray(images), t, np.asarray(eps, dtype=images.dtype), teacher.schedule)
    cap_t, cap_q = {}, {}
    teacher(x_t, t, labels, capture=cap_t)
    setup.student(x_t, t, labels, quant=setup.context(), capture=cap_q)
    total = None
    for tgt in targets:
        term = kd_loss(cap_t[tgt], cap_q[tgt])
        total = term if total is None else ops.add(total, term)
    return total


@dataclass
class QuantReport:
    kd_before: float
    kd_after: float
    train_loss: list[float] = field(default_factory=list)
    val_kd: list[float] = field(default_factory=list)


def train_quant_composer(
    setup: QuantSetup,
    composer: Composer,
    tcfg,
    train: SyntheticDataset,
    val: SyntheticDataset,
    draws: Optional[EvalDraws] = None,
    index: Optional[SimilarityIndex] = None,
) -> tuple[Composer, QuantReport]:
    """Distill the full-precision teacher into the quantized student via (A, B, gamma).

    Composer matrices are fake-quantized to the backbone weight bit-width in
    every forward pass (straight-through gradients).
    """
    if not composer.config.quant:
        raise ConfigError("train_quant_composer needs a quant-mode composer")
    teacher = setup.teacher
    cfg = teacher.config
    checksum = teacher.checksum()
    if draws is None:
        draws = EvalDraws.make(len(val), cfg.image_size, cfg.num_timesteps, 0)
    wbits = setup.qbackbone.config.weight_bits
    composer.weight_bits = None if wbits == 32 else wbits
    composer.set_trainable(True)
    kd_before = validation_kd(setup, None, val, draws, targets=composer.targets)
    report = QuantReport(kd_before, kd_before)
    if tcfg.pipeline == "context_similarity" and index is None:
        index = SimilarityIndex(train)
    spec = BatchSpec(tcfg.alpha, tcfg.batch, tcfg.pipeline)
    rng = SeededRng(tcfg.seed)
    state = AdamWState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    steps = tcfg.steps_per_epoch or max(1, len(train) // tcfg.batch)
    for epoch in range(tcfg.epochs):
        srng = rng.split("sampler", epoch).generator
        nrng = rng.split("noise", epoch).generator
        running = 0.0
        for _ in range(steps):
            anchor = int(srng.integers(len(train)))
            batch = sample_batch(train, spec, anchor, srng, index)
            t = nrng.integers(1, cfg.num_timesteps + 1, spec.b)
            eps = nrng.standard_normal((spec.b, cfg.image_size, cfg.image_size)).astype(np.float32)
            with Tape() as tape:
                loss = kd_batch_loss(setup, composer, batch.images, batch.labels, t, eps)
            running += loss.item()
            grads = backward(loss, tape)
            del tape
            named = {k: grads[p] for k, p in composer.params.items() if p in grads}
            composer.params = adamw_step(composer.params, named, state)
        if teacher.checksum() != checksum:
            raise IntegrityError(f"teacher weights changed during quant epoch {epoch}")
        report.train_loss.append(running / steps)
        report.val_kd.append(validation_kd(setup, composer, val, draws))
        log.info("quant epoch %d train kd %.4f val kd %.4f", epoch, report.train_loss[-1], report.val_kd[-1])
    composer.set_trainable(False)
    report.kd_after = report.val_kd[-1] if report.val_kd else kd_before
    return composer, report

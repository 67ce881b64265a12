"""Toy class-conditional diffusion denoiser.

A small pre-norm transformer over non-overlapping image patches.  Each
attention layer exposes its four projections ``W_Q, W_K, W_V, W_O`` as
adaptation targets addressed by ``(layer, kind)``.  Class and timestep
conditioning is a learned class embedding plus a linear map of sinusoidal
timestep features, added to every patch token.

Noise schedule (cosine, ``s = 0.008``)::

    f(t)     = cos^2(((t / T) + s) / (1 + s) * pi / 2)
    beta_t   = min(1 - f(t) / f(t - 1), 0.999)
    gamma_t  = prod_{u <= t} (1 - beta_u)          t = 1..T

``gamma_t`` is the cumulative signal fraction in
``x_t = sqrt(gamma_t) x + sqrt(1 - gamma_t) eps``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .composition import (
    GenerationCounters,
    LowRankUpdate,
    MergedWeights,
    apply_inference_path,
    apply_training_path,
    merge,
)
from .errors import ConfigError, DataError, ScheduleError
from .numerics import SeededRng, Tensor, no_tape, ops

TARGET_KINDS = ("Q", "K", "V", "O")

Target = tuple[int, str]
UpdateSet = dict  # Target -> LowRankUpdate


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 16
    patch_size: int = 4
    d: int = 64
    num_layers: int = 4
    num_heads: int = 4
    num_classes: int = 10
    num_timesteps: int = 100

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("backbone.image_size must be divisible by backbone.patch_size")
        if self.d % self.num_heads:
            raise ConfigError("backbone.d must be divisible by backbone.heads")
        if min(self.num_layers, self.num_classes, self.num_timesteps) < 1:
            raise ConfigError("backbone layer, class and timestep counts must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size

    @property
    def pixels(self) -> int:
        return self.image_size * self.image_size


class NoiseSchedule:
    """Cosine schedule; ``gamma(t)`` for integer ``t`` in ``[1, T]``."""

    def __init__(self, T: int, s: float = 0.008):
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos(((steps / T) + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
        self.T = T
        self.betas = betas
        self.gammas = np.cumprod(1.0 - betas)

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T) or not np.all(t == np.round(t)):
            raise ScheduleError(f"timestep out of range [1, {self.T}]: {t}")
        return t.astype(np.int64)

    def gamma(self, t) -> np.ndarray:
        """Signal fraction; ``t = 0`` is accepted and returns 1."""
        t = np.asarray(t)
        if np.any(t == 0):
            out = np.ones(t.shape)
            nz = t != 0
            out[nz] = self.gammas[self._check(t[nz]) - 1]
            return out
        return self.gammas[self._check(t) - 1]


def noising(x: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(gamma_t) x + sqrt(1 - gamma_t) eps``; ``t`` scalar or per-row."""
    if eps.shape != x.shape:
        raise DataError(f"noise shape {eps.shape} != image shape {x.shape}")
    g = schedule.gamma(t)
    g = np.reshape(g, np.shape(g) + (1,) * (x.ndim - np.ndim(g)))
    return (np.sqrt(g) * x + np.sqrt(1.0 - g) * eps).astype(x.dtype)


def collect_adaptation_targets(config: DenoiserConfig, subset: Iterable[str] = ("Q", "V")) -> list[Target]:
    """Targets ordered by layer, then Q, K, V, O."""
    subset = {s.upper() for s in subset}
    if not subset:
        raise ConfigError("adaptation target subset must not be empty")
    unknown = subset - set(TARGET_KINDS)
    if unknown:
        raise ConfigError(f"unknown adaptation targets {sorted(unknown)}")
    return [(layer, k) for layer in range(config.num_layers) for k in TARGET_KINDS if k in subset]


def weight_name(target: Target) -> str:
    layer, kind = target
    return f"layers.{layer}.attn.{kind}"


def timestep_features(t: np.ndarray, d: int) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    b, s, _ = x.shape
    g = s // p
    return x.reshape(b, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(b, g * g, p * p)


def unpatchify(tokens: Tensor, image_size: int, p: int) -> Tensor:
    b = tokens.shape[0]
    g = image_size // p
    x = ops.reshape(tokens, (b, g, g, p, p))
    x = ops.transpose(x, (0, 1, 3, 2, 4))
    return ops.reshape(x, (b, image_size, image_size))


def _init_params(cfg: DenoiserConfig, rng: SeededRng, dtype) -> dict[str, np.ndarray]:
    d, pd = cfg.d, cfg.patch_dim

    def dense(out_dim, in_dim, gain=1.0):
        return rng.normal((out_dim, in_dim), scale=gain / math.sqrt(in_dim), dtype=dtype)

    p: dict[str, np.ndarray] = {
        "patch.w": dense(d, pd),
        "patch.b": np.zeros(d, dtype),
        "pos": rng.normal((cfg.num_patches, d), scale=0.1, dtype=dtype),
        "cls": rng.normal((cfg.num_classes, d), scale=0.1, dtype=dtype),
        "time.w": dense(d, d),
        "time.b": np.zeros(d, dtype),
    }
    for layer in range(cfg.num_layers):
        pre = f"layers.{layer}"
        p[f"{pre}.ln1.g"] = np.ones(d, dtype)
        p[f"{pre}.ln1.b"] = np.zeros(d, dtype)
        for kind in TARGET_KINDS:
            p[f"{pre}.attn.{kind}"] = dense(d, d)
        p[f"{pre}.ln2.g"] = np.ones(d, dtype)
        p[f"{pre}.ln2.b"] = np.zeros(d, dtype)
        p[f"{pre}.ff1.w"] = dense(4 * d, d)
        p[f"{pre}.ff1.b"] = np.zeros(4 * d, dtype)
        p[f"{pre}.ff2.w"] = dense(d, 4 * d, gain=0.5)
        p[f"{pre}.ff2.b"] = np.zeros(d, dtype)
    p["out.ln.g"] = np.ones(d, dtype)
    p["out.ln.b"] = np.zeros(d, dtype)
    p["out.w"] = dense(pd, d, gain=0.5)
    p["out.b"] = np.zeros(pd, dtype)
    return p


class Denoiser:
    """Noise predictor ``eps_hat = f(x_t, t, class)`` with adaptation hooks."""

    def __init__(self, config: DenoiserConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.schedule = NoiseSchedule(config.num_timesteps)

    @classmethod
    def init(cls, config: DenoiserConfig, rng: SeededRng, dtype=np.float32) -> "Denoiser":
        raw = _init_params(config, rng, dtype)
        return cls(config, {k: Tensor(v, dtype=dtype) for k, v in raw.items()})

    @property
    def dtype(self):
        return self.params["patch.w"].dtype

    def astype(self, dtype) -> "Denoiser":
        return Denoiser(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def with_params(self, params: dict[str, Tensor]) -> "Denoiser":
        merged = dict(self.params)
        merged.update(params)
        return Denoiser(self.config, merged)

    def set_trainable(self, flag: bool) -> None:
        self.params = {k: Tensor._wrap(v.data, flag) for k, v in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def target_weights(self, targets: Iterable[Target], quant=None) -> dict[Target, Tensor]:
        out = {}
        for tgt in targets:
            name = weight_name(tgt)
            out[tgt] = quant.weight(name) if quant is not None else self.params[name]
        return out

    def validate_updates(self, updates: UpdateSet) -> None:
        cfg = self.config
        for key, upd in updates.items():
            layer, kind = key
            if not (0 <= layer < cfg.num_layers) or kind not in TARGET_KINDS:
                raise ConfigError(f"update targets missing backbone matrix {key}")
            if not isinstance(upd, LowRankUpdate):
                raise ConfigError(f"update for {key} is not a LowRankUpdate")
            if upd.A.shape[-2] != cfg.d or upd.B.shape[-1] != cfg.d:
                raise ConfigError(f"update for {key} has wrong width")

    # -- forward ---------------------------------------------------------------
    def _project(self, a, layer, kind, ctx) -> Tensor:
        key = (layer, kind)
        name = f"layers.{layer}.attn.{kind}"
        quant = ctx["quant"]
        x = a if quant is None else quant.prepare_input(name, key, a)
        merged = ctx["merged"]
        if merged is not None and key in merged:
            h = apply_inference_path(x, merged, key)
        else:
            W = quant.weight(name) if quant is not None else self.params[name]
            updates = ctx["updates"]
            h = apply_training_path(x, W, updates.get(key) if updates else None)
        capture = ctx["capture"]
        if capture is not None:
            capture[key] = h
        return h

    def _dense(self, x, name, ctx) -> Tensor:
        quant = ctx["quant"]
        if quant is not None:
            W = quant.weight(name + ".w")
            x = quant.prepare_input(name + ".w", None, x)
        else:
            W = self.params[name + ".w"]
        return ops.linear(x, W, self.params[name + ".b"])

    def forward(
        self,
        x_t,
        t,
        class_id,
        updates: Optional[UpdateSet] = None,
        mode: str = "train_path",
        merged: Optional[MergedWeights] = None,
        quant=None,
        capture: Optional[dict] = None,
        counters: Optional[GenerationCounters] = None,
    ) -> Tensor:
        """Predict the noise in ``x_t`` (shape ``(B, S, S)``).

        ``updates`` factors may be shared (``A`` of shape (d, r)) or per batch
        element (``(B, d, r)``).  ``mode="train_path"`` applies them as
        ``W x + A(B x)``; ``mode="merged"`` merges first.  A pre-built
        ``merged`` takes precedence over ``updates``.
        """
        cfg = self.config
        if mode not in ("train_path", "merged"):
            raise ConfigError(f"unknown forward mode {mode!r}")
        if updates:
            self.validate_updates(updates)
            if mode == "merged" and merged is None:
                base = self.target_weights(updates.keys(), quant)
                merged = merge(base, updates, counters=counters)
                updates = None
        x_np = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
        b = x_np.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        cls = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (b,))
        if np.any(cls < 0) or np.any(cls >= cfg.num_classes):
            raise DataError(f"class id out of range [0, {cfg.num_classes})")
        self.schedule._check(t)
        if counters is not None:
            counters.denoiser_calls += 1
            if merged is not None:
                counters.inference_path_applications += 1

        P = self.params
        dt = self.dtype
        if isinstance(x_t, Tensor):
            flat = ops.reshape(x_t, (b, cfg.image_size // cfg.patch_size, cfg.patch_size,
                                     cfg.image_size // cfg.patch_size, cfg.patch_size))
            patches = ops.reshape(ops.transpose(flat, (0, 1, 3, 2, 4)), (b, cfg.num_patches, cfg.patch_dim))
        else:
            patches = Tensor(patchify(x_np.astype(dt, copy=False), cfg.patch_size), dtype=dt)
        tfeat = Tensor(timestep_features(t, cfg.d), dtype=dt)
        cond = ops.add(ops.getitem(P["cls"], cls), ops.linear(tfeat, P["time.w"], P["time.b"]))
        h = ops.linear(patches, P["patch.w"], P["patch.b"])
        h = ops.add(ops.add(h, P["pos"]), ops.reshape(cond, (b, 1, cfg.d)))

        ctx = {"quant": quant, "merged": merged, "updates": updates, "capture": capture}
        for layer in range(cfg.num_layers):
            h = self._block(h, layer, ctx)
        h = ops.layer_norm(h, P["out.ln.g"], P["out.ln.b"])
        out = ops.linear(h, P["out.w"], P["out.b"])
        return unpatchify(out, cfg.image_size, cfg.patch_size)

    def _block(self, h: Tensor, layer: int, ctx: dict) -> Tensor:
        cfg = self.config
        P = self.params
        b, n = h.shape[:2]
        H = cfg.num_heads
        dh = cfg.d // H
        pre = f"layers.{layer}"
        a = ops.layer_norm(h, P[pre + ".ln1.g"], P[pre + ".ln1.b"])
        q = ops.transpose(ops.reshape(self._project(a, layer, "Q", ctx), (b, n, H, dh)), (0, 2, 1, 3))
        k = ops.transpose(ops.reshape(self._project(a, layer, "K", ctx), (b, n, H, dh)), (0, 2, 1, 3))
        v = ops.transpose(ops.reshape(self._project(a, layer, "V", ctx), (b, n, H, dh)), (0, 2, 1, 3))
        del a
        att = ops.attention(q, k, v, None, 1.0 / math.sqrt(dh))
        del q, k, v
        o = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (b, n, cfg.d))
        del att
        h = ops.add(h, self._project(o, layer, "O", ctx))
        del o
        f = ops.layer_norm(h, P[pre + ".ln2.g"], P[pre + ".ln2.b"])
        f = ops.gelu(self._dense(f, pre + ".ff1", ctx))
        return ops.add(h, self._dense(f, pre + ".ff2", ctx))

    __call__ = forward


def sample_timesteps(T: int, steps: int) -> np.ndarray:
    """Increasing sub-sequence of ``steps`` timesteps from ``[1, T]`` ending at ``T``."""
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T])
    return np.floor(np.linspace(1, T, steps) + 0.5).astype(np.int64)


def sample_loop(
    model: Denoiser,
    class_id: int,
    steps: int,
    updates: Optional[UpdateSet] = None,
    rng: Optional[SeededRng] = None,
    batch: int = 1,
    counters: Optional[GenerationCounters] = None,
    quant=None,
    merged: Optional[MergedWeights] = None,
) -> np.ndarray:
    """Ancestral sampling over a strided schedule; returns ``(batch, S, S)``.

    When ``updates`` are given they are merged into dense weights exactly once
    before the loop and every step uses the inference path.  Each step
    predicts ``x0`` from the noise estimate, clips it to [-1, 1] and draws from
    the Gaussian posterior ``q(x_prev | x_t, x0)``.
    """
    cfg = model.config
    sched = model.schedule
    taus = sample_timesteps(cfg.num_timesteps, steps)
    rng = rng if rng is not None else SeededRng(0).split("sampler")
    if counters is None:
        counters = GenerationCounters()
    if updates and merged is None:
        model.validate_updates(updates)
        merged = merge(model.target_weights(updates.keys(), quant), updates,
                       tag=f"class={class_id}", counters=counters)
    dt = model.dtype
    shape = (batch, cfg.image_size, cfg.image_size)
    x = rng.normal(shape, dtype=np.float64)
    with no_tape():
        for i in range(len(taus) - 1, -1, -1):
            t = int(taus[i])
            t_prev = int(taus[i - 1]) if i > 0 else 0
            eps = model.forward(x.astype(dt), t, class_id, merged=merged, quant=quant, counters=counters)
            eps = eps.data.astype(np.float64)
            g_t = float(sched.gamma(t))
            g_prev = float(sched.gamma(t_prev)) if t_prev > 0 else 1.0
            x0 = np.clip((x - math.sqrt(1.0 - g_t) * eps) / math.sqrt(g_t), -1.0, 1.0)
            if t_prev == 0:
                x = x0
                continue
            a_eff = g_t / g_prev
            b_eff = 1.0 - a_eff
            mean = (math.sqrt(g_prev) * b_eff / (1.0 - g_t)) * x0 + (
                math.sqrt(a_eff) * (1.0 - g_prev) / (1.0 - g_t)
            ) * x
            var = b_eff * (1.0 - g_prev) / (1.0 - g_t)
            x = mean + math.sqrt(var) * rng.normal(shape, dtype=np.float64)
    return x.astype(dt)
